//! Command-line entry points for simulation runs, convergence sweeps,
//! profile checks, weak-formulation checks and moment summaries.
//!
//! Exit codes: 0 success, 2 config error, 3 numerical failure,
//! 4 precondition (moment-check) rejection.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fibrokin::error::Error;
use fibrokin::harness::{experiment, report};
use fibrokin::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "fibrokin",
    version,
    about = "Kinetic cell-migration solver and verification harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured simulation pipeline and write CSV artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Epsilon-sweep convergence study against the macroscopic limit.
    Converge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Distance of the final velocity profile from the equilibrium closure.
    ProfileCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Weak-formulation residuals of the configured trajectories.
    WeakCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Fiber moments and assembled model coefficients.
    Moments {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                Error::Config(_) | Error::Domain(_) | Error::Io(_) => 2,
                Error::Numerical(_) => 3,
                Error::Precondition(_) => 4,
            })
        }
    }
}

fn dispatch(cli: Cli) -> fibrokin::Result<()> {
    match cli.command {
        Command::Run { config, out, quiet } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let artifacts = experiment::run_experiment(&cfg, &out)?;
            if !quiet {
                for w in &artifacts.warnings {
                    eprintln!("warning: {w}");
                }
                for f in &artifacts.files {
                    println!("{}", f.display());
                }
            }
            Ok(())
        }
        Command::Converge { config, out, quiet } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let rep = experiment::converge(&cfg, Some(&out))?;
            if !quiet {
                for row in &rep.rows {
                    println!(
                        "epsilon={:<8} t={:<8} l1_error={:.6e}{}",
                        row.epsilon,
                        row.time,
                        row.l1_error,
                        row.ratio
                            .map(|r| format!(" ratio={r:.3}"))
                            .unwrap_or_default()
                    );
                }
            }
            Ok(())
        }
        Command::ProfileCheck { config, out, quiet } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let dist = experiment::profile_check(&cfg)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(
                    dir.join("profile_check.csv"),
                    format!("profile_distance\n{}\n", report::fmt_float(dist)),
                )?;
            }
            if !quiet {
                println!("profile_distance={dist:.6e}");
            }
            Ok(())
        }
        Command::WeakCheck { config, out, quiet } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let reports = experiment::weak_check(&cfg, Some(&out))?;
            if !quiet {
                for rep in &reports {
                    println!(
                        "{}: max normalized residual = {:.6e}",
                        rep.kind.name(),
                        rep.max_normalized
                    );
                }
            }
            Ok(())
        }
        Command::Moments { config, out, quiet } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let summary = experiment::moments_summary(&cfg)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                experiment::write_moments_csv(&cfg, &dir.join("moments.csv"))?;
            }
            if !quiet {
                print!("{summary}");
            }
            Ok(())
        }
    }
}
