use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polymer2d_cli::{exit, list_text, run, validate, Config, RunError, Violation};

#[derive(Parser)]
#[command(name = "polymer2d", version, about = "Directed polymer experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a named experiment.
    Run {
        name: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the experiment catalog.
    List,
    /// Check a configuration without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(path: &PathBuf) -> Result<Config, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        RunError::Invalid(vec![Violation(format!("reading {}: {e}", path.display()))])
    })?;
    Config::parse(&text).map_err(|v| RunError::Invalid(vec![v]))
}

fn main_code() -> Result<i32, RunError> {
    match Cli::parse().cmd {
        Cmd::List => {
            print!("{}", list_text());
            Ok(exit::PASS)
        }
        Cmd::Validate { config } => {
            let exp = validate(&load(&config)?)?;
            println!("ok: {}", exp.name);
            Ok(exit::PASS)
        }
        Cmd::Run {
            name,
            config,
            seed,
            out,
        } => {
            let cfg = match &config {
                Some(p) => load(p)?,
                None => {
                    let mut c = Config::default();
                    c.set("experiment", name.clone());
                    c
                }
            };
            let rep = run(&name, cfg, seed, out.as_deref())?;
            for c in &rep.checks {
                println!(
                    "{} {} (margin {:.3e})",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.margin
                );
            }
            for p in &rep.paths {
                println!("wrote {}", p.display());
            }
            Ok(if rep.pass() {
                exit::PASS
            } else {
                exit::CHECKS_FAILED
            })
        }
    }
}

fn main() -> ExitCode {
    match main_code() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprint!("{e}");
            if !e.to_string().ends_with('\n') {
                eprintln!();
            }
            ExitCode::from(e.code() as u8)
        }
    }
}
