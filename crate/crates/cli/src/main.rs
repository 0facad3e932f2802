//! Command-line driver for reproducible forecasting experiments: generate a
//! dataset, train one run per seed, evaluate with whiteness diagnostics, and
//! merge runs into a comparison table.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crosscast_core::data::DataError;
use crosscast_core::eval::EvalError;
use crosscast_core::graph::GraphError;
use crosscast_core::model::ModelError;
use crosscast_core::train::TrainError;

mod commands;
mod config;

use commands::Target;
use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {detail}")]
    Config { detail: String },
    #[error("missing artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: &'static str },
    #[error("run directory {} already has results; pass --force to overwrite", path.display())]
    RunExists { path: PathBuf },
    #[error("corrupted artifact {}: {detail}", path.display())]
    Corrupted { path: PathBuf, detail: String },
    #[error("dataset: {0}")]
    Data(#[from] DataError),
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Parser)]
#[command(name = "crosscast", version, about = "Forecasting experiments on graph time series")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the configured synthetic dataset into the output directory
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides output_dir from the config
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per seed
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seed list, overriding the config
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
        /// Overwrite existing run directories
        #[arg(long)]
        force: bool,
    },
    /// Evaluate trained checkpoints on the test split
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
    },
    /// Merge evaluation summaries from several output directories
    Report {
        /// Directory for the merged report files
        #[arg(long)]
        out: PathBuf,
        /// Output directories of completed evaluations
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn run() -> Result<(), CliError> {
    match Cli::parse().cmd {
        Cmd::Generate { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_generate(&Target::new(cfg, out, None, false)?)
        }
        Cmd::Train { config, out, seed, force } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_train(&Target::new(cfg, out, seed, force)?)
        }
        Cmd::Evaluate { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_evaluate(&Target::new(cfg, out, seed, false)?)
        }
        Cmd::Report { out, runs } => commands::cmd_report(&runs, &out),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
