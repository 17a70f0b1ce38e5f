//! `s2d`: generate data, train, distil, evaluate and decompose uncertainty.
//!
//! Exit codes: 0 on success, 2 when the config or inputs are rejected
//! before any work starts, 1 for failures while running.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// An input rejected before any work started.
#[derive(Debug)]
pub struct ValidationError(pub String);

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

#[derive(Parser)]
#[command(name = "s2d", version, about = "Self-distribution distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Train or evaluate ensemble members on separate threads.
    #[arg(long)]
    parallel_members: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/test/OOD CSVs for the configured generator.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model per seed.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Distil teacher checkpoints into one student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Accuracy, calibration and OOD detection report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Uncertainty decomposition for one input, printed as JSON.
    Decompose {
        #[command(flatten)]
        common: Common,
        /// Comma-separated feature values.
        #[arg(long, allow_hyphen_values = true)]
        input: String,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common } => commands::gen_data(&config::RunConfig::load(&common.config)?),
        Command::Train { common } => commands::train(&config::RunConfig::load(&common.config)?, common.parallel_members),
        Command::Distill { common, checkpoints } => commands::distill(&config::RunConfig::load(&common.config)?, &checkpoints),
        Command::Eval { common, checkpoints } => {
            commands::eval(&config::RunConfig::load(&common.config)?, &checkpoints, common.parallel_members)
        }
        Command::Decompose { common, input, checkpoints } => {
            let record = commands::decompose(&config::RunConfig::load(&common.config)?, &checkpoints, &input)?;
            println!("{record}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ValidationError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
