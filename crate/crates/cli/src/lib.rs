//! Named, reproducible experiment drivers. Each run reads a `key = value`
//! configuration and writes `<name>.json`, `<name>.csv` and `<name>.plot`.

pub mod config;
pub mod experiments;
pub mod output;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use polymer2d::stats::{Check, WORKERS_VAR};

pub use config::{Config, Violation};
pub use experiments::{catalog, find, Experiment};

/// Process exit codes.
pub mod exit {
    pub const PASS: i32 = 0;
    pub const CHECKS_FAILED: i32 = 1;
    pub const UNKNOWN: i32 = 2;
    pub const INVALID: i32 = 3;
    pub const RUNTIME: i32 = 4;
}

#[derive(Debug)]
pub enum RunError {
    Unknown(String),
    Invalid(Vec<Violation>),
    Runtime(String),
}

impl RunError {
    pub fn code(&self) -> i32 {
        match self {
            RunError::Unknown(_) => exit::UNKNOWN,
            RunError::Invalid(_) => exit::INVALID,
            RunError::Runtime(_) => exit::RUNTIME,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Unknown(name) => write!(f, "unknown experiment '{name}'\n{}", list_text()),
            RunError::Invalid(vs) => {
                writeln!(f, "invalid configuration:")?;
                for v in vs {
                    writeln!(f, "  {v}")?;
                }
                Ok(())
            }
            RunError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

pub struct RunReport {
    pub paths: [PathBuf; 3],
    pub checks: Vec<Check>,
    pub digest: String,
}

impl RunReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

pub fn list_text() -> String {
    let mut s = String::new();
    for e in catalog() {
        let _ = writeln!(s, "{:<20} {} [{}]", e.name, e.about, e.anchor);
    }
    s
}

fn lookup(name: &str) -> Result<&'static Experiment, RunError> {
    find(name).ok_or_else(|| RunError::Unknown(name.to_string()))
}

/// All violations of `cfg`, which must name its experiment.
pub fn validate(cfg: &Config) -> Result<&'static Experiment, RunError> {
    let name = cfg.raw("experiment").ok_or_else(|| {
        RunError::Invalid(vec![Violation("missing required key 'experiment'".into())])
    })?;
    let exp = lookup(name)?;
    let vs = experiments::violations(exp, cfg);
    if vs.is_empty() {
        Ok(exp)
    } else {
        Err(RunError::Invalid(vs))
    }
}

/// Runs `name` with overrides applied to the configuration first, so the
/// digest and the artifacts reflect what actually ran.
pub fn run(
    name: &str,
    mut cfg: Config,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<RunReport, RunError> {
    let exp = lookup(name)?;
    if let Some(s) = seed {
        cfg.set("seed", s.to_string());
    }
    if let Some(dir) = out {
        cfg.set("output.dir", dir.display().to_string());
    }
    let vs = experiments::violations(exp, &cfg);
    if !vs.is_empty() {
        return Err(RunError::Invalid(vs));
    }
    let seed = cfg
        .count("seed", 0)
        .map_err(|v| RunError::Invalid(vec![v]))?;
    if let Some(w) = cfg.raw("workers") {
        std::env::set_var(WORKERS_VAR, w);
    }
    let outcome = experiments::execute(exp, &cfg, seed).map_err(|f| match f {
        experiments::Failure::Invalid(v) => RunError::Invalid(vec![v]),
        experiments::Failure::Runtime(m) => RunError::Runtime(m),
    })?;
    let dir = PathBuf::from(cfg.text("output.dir", "."));
    let stamp = output::Stamp {
        name: exp.name.to_string(),
        digest: cfg.digest(),
        seed,
    };
    let paths = output::write_all(
        &dir,
        &stamp,
        cfg.entries(),
        &outcome.summary,
        &outcome.table,
        &outcome.plot,
        &outcome.checks,
    )
    .map_err(|e| RunError::Runtime(format!("writing artifacts to {}: {e}", dir.display())))?;
    Ok(RunReport {
        paths,
        checks: outcome.checks,
        digest: stamp.digest,
    })
}
