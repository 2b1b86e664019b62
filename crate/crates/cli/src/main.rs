//! `dualflood` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error (missing,
//! corrupt, incompatible or wrong-version inputs), 4 numerical divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualflood::FloodError;

use config::{ModelKindArg, PhysicsArg};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Flood(#[from] FloodError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Flood(e) => match e {
                FloodError::Diverged { .. } => 4,
                e if e.is_data_error() => 3,
                FloodError::Image(_) => 1,
                _ => 2,
            },
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dualflood", version, about = "Graph surrogate for joint node-volume and edge-flow flood routing")]
pub struct Cli {
    /// Root for default output locations.
    #[arg(long, global = true, env = "DUALFLOOD_OUTPUT_ROOT", default_value = "runs")]
    pub output_root: PathBuf,

    /// Worker threads for per-event parallel work (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic catchment and flood events.
    GenData(GenDataArgs),
    /// Train a model with the rollout curriculum.
    Train(TrainArgs),
    /// Roll out every event of a split and write metric reports.
    Eval(EvalArgs),
    /// Roll out one event and write the predicted trajectories.
    Rollout(RolloutArgs),
    /// Summarize an eval directory as a table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// JSON config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset directory (default: <output-root>/data).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub events: Option<usize>,
    #[arg(long)]
    pub nodes: Option<usize>,
    /// States per event, including the initial one.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (default: <output-root>/data).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory (default: <output-root>/train).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Which mass-balance terms stay active.
    #[arg(long, value_enum)]
    pub physics: Option<PhysicsArg>,
    /// Drop the broadcast Q_in/Q_out node channels.
    #[arg(long)]
    pub no_inflow_feature: bool,
    /// Write a ground-truth replay checkpoint instead of training.
    #[arg(long, value_enum)]
    pub model_kind: Option<ModelKindArg>,
    /// Train K cross-validation folds into <out>/fold_<k>.
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub target_horizon: Option<usize>,
    #[arg(long)]
    pub curriculum_step: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_train_windows: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub gnn_layers: Option<usize>,
    #[arg(long)]
    pub mlp_layers: Option<usize>,
    /// History length p.
    #[arg(long)]
    pub history: Option<usize>,
    /// Continue from <out>/checkpoints/last.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory (default: <output-root>/train/checkpoints/best,
    /// falling back to last).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// train, val, test or all.
    #[arg(long)]
    pub split: Option<String>,
    /// Split file (default: split.json of the checkpoint's run directory).
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    /// Predicted steps per event (default: to the end of the event).
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Depth thresholds (m) for CSI.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Output directory (default: <output-root>/eval).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Event index in the dataset.
    #[arg(long, default_value_t = 0)]
    pub event: usize,
    /// Initial timestep (default: the model's history length).
    #[arg(long)]
    pub start: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Output directory (default: <output-root>/rollout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// An eval output directory (default: <output-root>/eval).
    #[arg(long)]
    pub eval_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
