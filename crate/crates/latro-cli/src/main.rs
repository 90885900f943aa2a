//! Command-line front end: `latro run <config>`, `latro compare <a> <b>`,
//! `latro validate <config>`.
//!
//! Set `LATRO_VERBOSE=1` for per-iteration progress on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "latro", about = "Nonlinear hyperelastic lattice solver", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured simulation and write artifacts to the output dir
    Run { config: PathBuf },
    /// Compare two run reports (standard vs reduced-basis layout)
    Compare { report_a: PathBuf, report_b: PathBuf },
    /// Parse and validate a config without running
    Validate { config: PathBuf },
}

fn verbose() -> bool {
    std::env::var("LATRO_VERBOSE").map(|v| v != "0" && !v.is_empty()).unwrap_or(false)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => match latro::driver::run(&config) {
            Ok(artifacts) => {
                let r = &artifacts.report;
                println!(
                    "{}: {} cells, {} DOFs, {} Newton iterations over {} increments",
                    r.path, r.n_cells, r.n_dof, r.total_newton_iterations, r.increments
                );
                if verbose() {
                    for (k, n_r) in r.n_r_per_iteration.iter().enumerate() {
                        eprintln!("iteration {}: N_r = {}", k, n_r);
                    }
                    for (inc, it, level) in &r.enrichment_events {
                        eprintln!(
                            "primal enrichment to level {} at increment {}, iteration {}",
                            level, inc, it
                        );
                    }
                }
                println!("artifacts in {}", artifacts.output_dir.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {}", e);
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Command::Compare { report_a, report_b } => {
            match latro::driver::compare(&report_a, &report_b) {
                Ok((_, table)) => {
                    print!("{}", table);
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {}", e);
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Command::Validate { config } => match latro::driver::load_config(&config) {
            Ok(_) => {
                println!("ok");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {}", e);
                ExitCode::from(e.exit_code() as u8)
            }
        },
    }
}
