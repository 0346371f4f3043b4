use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uq_core::bench::{run, ExperimentConfig};
use uq_core::UqError;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "uq",
    about = "Confidence sets and low-rank tests for matrix completion experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write records.csv and report.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<usize>,
        /// Output directory; defaults to the config's `output` or `./out`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the version.
    Version,
}

fn exit_for(err: &UqError) -> ExitCode {
    eprintln!("error: {err}");
    match err {
        UqError::Config { .. } => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Version => {
            println!("uq {}", env!("CARGO_PKG_VERSION"));
            ExitCode::SUCCESS
        }
        Command::Validate { config } => {
            match ExperimentConfig::load(&config).and_then(|c| c.validate()) {
                Ok(()) => {
                    println!("ok");
                    ExitCode::SUCCESS
                }
                Err(e) => exit_for(&e),
            }
        }
        Command::Run {
            config,
            seed,
            reps,
            out,
            threads,
        } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return exit_for(&e),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = reps {
                cfg.reps = r;
            }
            if let Some(t) = threads {
                cfg.threads = Some(t);
            }
            let dir = out
                .or_else(|| cfg.output.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out"));
            let report = match run(&cfg) {
                Ok(r) => r,
                Err(e) => return exit_for(&e),
            };
            if let Err(e) = report.write_outputs(&dir) {
                return exit_for(&e);
            }
            println!(
                "wrote {} records to {}",
                report.records.len(),
                dir.display()
            );
            if report.failures > 0 {
                eprintln!(
                    "{} replicate(s) flagged a numerical failure",
                    report.failures
                );
                return ExitCode::from(EXIT_NUMERICAL);
            }
            ExitCode::SUCCESS
        }
    }
}
