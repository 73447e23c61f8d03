//! `fedcsr` command line: train, sweep, report and check.
//!
//! Exit status is 0 only when every invariant suite passes: 1 for a failed
//! invariant or oracle, 2 for invalid configuration, 3 for any other error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedcsr_cli::invariants::{check_run_dir, check_sweep_dir};
use fedcsr_cli::oracle::{run_gradient_checks, run_oracles, OracleResult};
use fedcsr_cli::{emit_report, run_experiment, run_sweep, CliError, ExperimentConfig, Result};

#[derive(Parser)]
#[command(
    name = "fedcsr",
    version,
    about = "Federated disentangled cross-domain sequential recommendation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seeded repeat of one configuration and write its report.
    Run {
        config: PathBuf,
        /// Override a configuration key, e.g. `--set train.rounds=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the `[sweep]` grid of a configuration.
    Sweep {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Regenerate report.md, report.csv and plots from an artifact directory.
    Report { dir: PathBuf },
    /// Run the closed-form oracle suite.
    OracleCheck {
        /// Also compare every loss gradient with finite differences.
        #[arg(long)]
        gradients: bool,
    },
}

fn print_oracles(results: &[OracleResult]) -> Result<()> {
    let mut failed = Vec::new();
    for r in results {
        println!(
            "{} {:<40} expected {:>12.6e} actual {:>12.6e} tol {:.0e}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.expected,
            r.actual,
            r.tolerance
        );
        if !r.pass {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invariant(format!(
            "oracle checks failed: {}",
            failed.join(", ")
        )))
    }
}

fn preflight() -> Result<()> {
    let failed: Vec<String> = run_oracles().into_iter().filter(|r| !r.pass).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invariant(format!(
            "oracle preflight failed: {}",
            failed.join(", ")
        )))
    }
}

fn ensure(violations: Vec<String>) -> Result<()> {
    if violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invariant(violations.join("; ")))
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            preflight()?;
            let out = run_experiment(&cfg)?;
            ensure(check_run_dir(&out.dir))?;
            emit_report(&out.dir)?;
            println!("{}", out.dir.display());
        }
        Command::Sweep { config, overrides } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            preflight()?;
            let (dir, _) = run_sweep(&cfg)?;
            ensure(check_sweep_dir(&dir))?;
            emit_report(&dir)?;
            println!("{}", dir.display());
        }
        Command::Report { dir } => {
            for f in emit_report(&dir)? {
                println!("{}", f.display());
            }
        }
        Command::OracleCheck { gradients } => {
            let mut results = run_oracles();
            if gradients {
                results.extend(run_gradient_checks());
            }
            print_oracles(&results)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
