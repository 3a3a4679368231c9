//! `mocurate`: synthetic data, pretraining, ranking, annotation, the
//! robustness and ablation harnesses, and the annotation service.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("pretraining diverged: {0}")]
    Divergence(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "mocurate", version, about = "Rank, label and annotate motion capture data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every pipeline command.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Pipeline config JSON.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set pretrain.schedule.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the procedural benchmark: dataset, labels, classes and a config.
    Synth(commands::SynthArgs),
    /// Contrastive pretraining: checkpoint and per-step loss CSV.
    Pretrain(commands::PretrainArgs),
    /// Order the dataset for labelling.
    Rank(commands::RankArgs),
    /// Train the annotator on a labelled prefix and predict the rest.
    Annotate(commands::AnnotateArgs),
    /// Mean and std of micro-F1 per budget over initial-element seeds.
    Robustness(commands::RobustnessArgs),
    /// Cumulative augmentation ablation.
    Ablation(commands::AblationArgs),
    /// Run the annotation HTTP service.
    Serve(commands::ServeArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Rank(a) => commands::rank_command(a),
        Command::Annotate(a) => commands::annotate(a),
        Command::Robustness(a) => commands::robustness(a),
        Command::Ablation(a) => commands::ablation(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
