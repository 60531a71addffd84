//! Command-line front end: cross-validation, ablations, sweeps, walk
//! simulation and gradient checks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctqwformer::model::Ablation;
use ctqwformer::Error;

#[derive(Debug, Parser)]
#[command(name = "ctqwformer", version, about = "Graph classification with trainable quantum walks")]
pub struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed (overrides `train.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Dataset root (overrides `dataset.root` and $CTQW_DATA_ROOT).
    #[arg(long, global = true)]
    pub dataset_root: Option<PathBuf>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stratified k-fold cross-validation.
    Cv {
        /// Also write each fold's retained parameters.
        #[arg(long)]
        save_checkpoints: bool,
    },
    /// Simulate the walk on one graph and dump the evolution tensor.
    Simulate {
        /// Index of the graph within the dataset.
        #[arg(long, default_value_t = 0)]
        graph: usize,
        /// Number of time steps (defaults to `model.time_steps`).
        #[arg(long)]
        steps: Option<usize>,
        /// Use the encoder of a trained checkpoint instead of unit weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Read graphs from a fixture file instead of a TU dataset.
        #[arg(long)]
        fixture: Option<PathBuf>,
    },
    /// Finite-difference check of the full model's gradients.
    Gradcheck {
        #[arg(long, default_value_t = 6)]
        nodes: usize,
        #[arg(long, default_value_t = ctqwformer::gradcheck::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = ctqwformer::gradcheck::DEFAULT_EPS)]
        eps: f64,
        /// Node feature width of the random graph.
        #[arg(long, default_value_t = 7)]
        features: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
    },
    /// Cross-validation with one module removed.
    Ablate {
        /// `no_qwgt` or `no_qwgr`; repeat to remove both (rejected).
        #[arg(long, required = true, value_parser = parse_ablation)]
        which: Vec<Ablation>,
    },
    /// One cross-validation per grid value.
    Sweep {
        /// `time_steps` or `layers`.
        #[arg(long)]
        grid: String,
        /// Comma-separated values; defaults to the standard grid.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse::<Ablation>().map_err(|e| e.to_string())
}

/// 1 for configuration problems, 2 for missing or malformed inputs,
/// 3 for numerical failures (including a failed gradient check).
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Contract(_) => 1,
        e if e.is_dataset_error() => 2,
        Error::Checkpoint(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
