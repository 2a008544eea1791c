//! Experiment entry point: validate a config, run it (every seed), or
//! compare two finished runs.
//!
//! Exit codes: 0 success, 2 config parse/validation failure, 3 numerical
//! divergence (partial logs are flushed before exiting), 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use feddkc::config::{load_config, Manifest, RunConfig};
use feddkc::runner::{compare_runs, execute_run, execute_single_seed, resolved_output_dir};
use feddkc::Error;

#[derive(Parser)]
#[command(name = "feddkc", version, about = "Federated distillation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config file (or re-run a single-seed manifest.json).
    Run { config: PathBuf },
    /// Check a config file without running anything.
    Validate { config: PathBuf },
    /// Compare two finished run directories (baseline first).
    Compare { baseline: PathBuf, treatment: PathBuf },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Parse { .. } | Error::InvalidConfig { .. } | Error::InvalidTarget(_) => EXIT_CONFIG,
        Error::NumericalDivergence(_) => EXIT_DIVERGED,
        _ => 1,
    }
}

fn load_run_input(path: &Path) -> Result<(RunConfig, Option<u64>), Error> {
    if path.extension().is_some_and(|e| e == "json") {
        let manifest = Manifest::load(path)?;
        let seed = manifest.seed;
        Ok((manifest.config, Some(seed)))
    } else {
        Ok((load_config(path)?, None))
    }
}

fn run(path: &Path) -> Result<u8, Error> {
    let (config, manifest_seed) = load_run_input(path)?;
    config.validate()?;

    let mut diverged = false;
    match manifest_seed {
        Some(seed) => {
            let out_dir = resolved_output_dir(&config).join(format!("seed_{seed}"));
            let result = execute_single_seed(&config, seed, &out_dir)?;
            report_seed(&result.seed, result.avg_top1, &result.dir, &result.aborted);
            diverged |= result.aborted.is_some();
        }
        None => {
            let result = execute_run(&config)?;
            for seed in &result.seeds {
                report_seed(&seed.seed, seed.avg_top1, &seed.dir, &seed.aborted);
            }
            diverged |= result.any_aborted();
        }
    }
    Ok(if diverged { EXIT_DIVERGED } else { 0 })
}

fn report_seed(seed: &u64, avg_top1: f64, dir: &Path, aborted: &Option<String>) {
    match aborted {
        Some(reason) => println!("seed {seed}: ABORTED ({reason}); partial logs in {}", dir.display()),
        None => println!("seed {seed}: avg final top-1 {avg_top1:.4} -> {}", dir.display()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config } => run(config),
        Command::Validate { config } => load_config(config)
            .and_then(|cfg| cfg.validate())
            .map(|()| {
                println!("ok");
                0
            }),
        Command::Compare {
            baseline,
            treatment,
        } => compare_runs(baseline, treatment).map(|report| {
            print!("{}", report.render());
            0
        }),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
