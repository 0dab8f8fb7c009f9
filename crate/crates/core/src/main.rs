use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mpcrl::harness::{run_experiment, run_oracle_suite, write_outputs, ExperimentConfig, OracleSettings};
use mpcrl::Error;

/// Parametric MPC experiments. Log verbosity follows `RUST_LOG`.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of repetitions.
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Check a config file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the dynamic-programming and sensitivity property suites.
    OracleSuite {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::Config(_) => ExitCode::from(2),
        e if e.is_numerical() => ExitCode::from(3),
        _ => ExitCode::from(1),
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run { config, out, seed, reps } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(reps) = reps {
                cfg.repetitions = reps;
            }
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
            run_experiment(&cfg, &dir)?;
            println!("wrote {}", dir.display());
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!("{}: valid {} config", config.display(), cfg.experiment.name());
        }
        Command::OracleSuite { out, seed } => {
            let report = run_oracle_suite(&OracleSettings {
                seed,
                ..OracleSettings::default()
            })?;
            write_outputs(&report.outputs, &out)?;
            println!("oracle suite {}; wrote {}", if report.passed() { "passed" } else { "FAILED" }, out.display());
            // A violated property is a numerical failure.
            if !report.passed() {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
