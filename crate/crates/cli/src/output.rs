//! Artifact emission: `{name}.json`, `{name}.csv` and a gnuplot script
//! `{name}.plot` that reads the CSV by relative path.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use polymer2d::stats::Check;
use serde_json::{json, Value};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<i64> for Cell {
    fn from(x: i64) -> Self {
        Cell::Int(x)
    }
}

impl From<String> for Cell {
    fn from(x: String) -> Self {
        Cell::Text(x)
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.to_string())
    }
}

/// 17 significant digits, `.` decimal point, independent of locale.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:.16e}")
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Num(x) => fmt_num(*x),
            Cell::Text(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// Columns (1-based) to draw against a common x column.
#[derive(Debug, Clone)]
pub struct Plot {
    pub x: usize,
    pub ys: Vec<usize>,
    pub xlabel: String,
    pub ylabel: String,
    pub logx: bool,
    pub logy: bool,
}

impl Plot {
    pub fn lines(x: usize, ys: &[usize], xlabel: &str, ylabel: &str) -> Self {
        Self {
            x,
            ys: ys.to_vec(),
            xlabel: xlabel.into(),
            ylabel: ylabel.into(),
            logx: false,
            logy: false,
        }
    }

    pub fn logx(mut self) -> Self {
        self.logx = true;
        self
    }

    pub fn logy(mut self) -> Self {
        self.logy = true;
        self
    }
}

/// Provenance carried by every artifact.
#[derive(Debug, Clone)]
pub struct Stamp {
    pub name: String,
    pub digest: String,
    pub seed: u64,
}

impl Stamp {
    fn line(&self) -> String {
        format!(
            "# polymer2d {} config_digest={} seed={} version={}\n",
            self.name, self.digest, self.seed, VERSION
        )
    }
}

pub fn render_csv(stamp: &Stamp, t: &Table) -> String {
    let mut s = stamp.line();
    s.push_str(&t.header.join(","));
    s.push('\n');
    for row in &t.rows {
        let cells: Vec<String> = row.iter().map(Cell::render).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn render_plot(stamp: &Stamp, p: &Plot, t: &Table) -> String {
    let name = &stamp.name;
    let mut s = stamp.line();
    s.push_str("set datafile separator ','\n");
    s.push_str("set datafile commentschars '#'\n");
    s.push_str("set key autotitle columnhead\n");
    s.push_str("set terminal pngcairo size 900,600\n");
    let _ = writeln!(s, "set output '{name}.png'");
    let _ = writeln!(s, "set xlabel '{}'", p.xlabel);
    let _ = writeln!(s, "set ylabel '{}'", p.ylabel);
    if p.logx {
        s.push_str("set logscale x\n");
    }
    if p.logy {
        s.push_str("set logscale y\n");
    }
    let parts: Vec<String> =
        p.ys.iter()
            .enumerate()
            .map(|(i, y)| {
                let file = if i == 0 {
                    format!("'{name}.csv'")
                } else {
                    "''".into()
                };
                let title = t.header.get(y - 1).cloned().unwrap_or_default();
                format!("{file} using {}:{y} with linespoints title '{title}'", p.x)
            })
            .collect();
    let _ = writeln!(s, "plot {}", parts.join(", \\\n     "));
    s
}

pub fn render_json(
    stamp: &Stamp,
    config: &std::collections::BTreeMap<String, String>,
    summary: &Value,
    checks: &[Check],
) -> String {
    let v = json!({
        "name": stamp.name,
        "version": VERSION,
        "seed": stamp.seed,
        "config_digest": stamp.digest,
        "config": config,
        "pass": checks.iter().all(|c| c.pass),
        "checks": checks,
        "summary": summary,
    });
    let mut s = serde_json::to_string_pretty(&v).expect("json values serialize");
    s.push('\n');
    s
}

/// Writes the three artifacts into `dir`, returning their paths.
pub fn write_all(
    dir: &Path,
    stamp: &Stamp,
    config: &std::collections::BTreeMap<String, String>,
    summary: &Value,
    table: &Table,
    plot: &Plot,
    checks: &[Check],
) -> io::Result<[PathBuf; 3]> {
    fs::create_dir_all(dir)?;
    let paths = [
        dir.join(format!("{}.json", stamp.name)),
        dir.join(format!("{}.csv", stamp.name)),
        dir.join(format!("{}.plot", stamp.name)),
    ];
    fs::write(&paths[0], render_json(stamp, config, summary, checks))?;
    fs::write(&paths[1], render_csv(stamp, table))?;
    fs::write(&paths[2], render_plot(stamp, plot, table))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_keep_seventeen_digits() {
        assert_eq!(fmt_num(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_num(-2.0), "-2.0000000000000000e0");
        assert_eq!(fmt_num(f64::NAN), "nan");
        let x = 0.208_215_178_432_951_3_f64;
        assert_eq!(fmt_num(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn csv_and_plot_share_the_stamp() {
        let stamp = Stamp {
            name: "demo".into(),
            digest: "abc".into(),
            seed: 7,
        };
        let mut t = Table::new(&["n", "y"]);
        t.push(vec![1usize.into(), 0.5.into()]);
        let csv = render_csv(&stamp, &t);
        assert!(csv.starts_with("# polymer2d demo config_digest=abc seed=7 version="));
        assert_eq!(csv.lines().nth(1), Some("n,y"));
        let plot = render_plot(&stamp, &Plot::lines(1, &[2], "n", "y"), &t);
        assert!(plot.contains("'demo.csv' using 1:2"));
        assert!(plot.contains("config_digest=abc"));
    }
}
