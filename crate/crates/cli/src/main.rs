use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;
use xdhom_core::harness::{self, Config};
use xdhom_core::Error;

/// Homogenization toolkit for degenerate cross-diffusion systems.
#[derive(Debug, Parser)]
#[command(name = "xdhom", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the cell problems and write correctors and tensors.
    Cell {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Effective tensor at a macroscopic state.
    Effective {
        #[arg(long)]
        config: PathBuf,
        /// JSON file holding `[u_1, ...]` or `{"u": [...]}`.
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transient run of the homogenized system.
    Macro {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transient run of the oscillating system.
    Micro {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Epsilon-convergence study.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample the structural assumptions of a model; prints JSON.
    Check {
        #[arg(long)]
        model: String,
        /// JSON object with model parameters.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_json(path: &Path) -> Result<Value, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn list(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Cell { config, out } => {
            let cfg = Config::load(&config)?;
            list(&harness::command_cell(&cfg, &out)?);
        }
        Command::Effective { config, state, out } => {
            let cfg = Config::load(&config)?;
            let text = std::fs::read_to_string(&state).map_err(|e| Error::io(&state, e))?;
            let u = harness::parse_state(&text)?;
            harness::command_effective(&cfg, &u, &out)?;
            println!("wrote {}", out.join("tensor.json").display());
        }
        Command::Macro { config, out } => {
            let cfg = Config::load(&config)?;
            let s = harness::command_macro(&cfg, &out)?;
            println!(
                "{} steps, mass drift {:.3e}, output in {}",
                s.steps,
                s.mass_drift,
                out.display()
            );
        }
        Command::Micro { config, eps, out } => {
            let cfg = Config::load(&config)?;
            let s = harness::command_micro(&cfg, eps, &out)?;
            println!(
                "{} steps on {:?} cells, mass drift {:.3e}, output in {}",
                s.steps,
                s.cells,
                s.mass_drift,
                out.display()
            );
        }
        Command::Sweep { config, out } => {
            let cfg = Config::load(&config)?;
            let r = harness::command_sweep(&cfg, &out)?;
            for row in &r.rows {
                match &row.failure {
                    None => println!("eps {:<10} L2 {:.6e}", row.eps, row.l2_error),
                    Some(f) => println!("eps {:<10} failed: {f}", row.eps),
                }
            }
            if let Some(rate) = r.rate {
                println!("fitted rate {rate:.3}");
            }
            if let Some(sc) = &r.self_check {
                if !sc.passed {
                    eprintln!(
                        "warning: macro reference not grid-converged (gap ratio {:.3})",
                        sc.ratio
                    );
                }
            }
        }
        Command::Check {
            model,
            params,
            samples,
            seed,
        } => {
            let params = match params {
                Some(p) => read_json(&p)?,
                None => Value::Null,
            };
            let (_, text) = harness::command_check(&model, &params, samples, seed)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
