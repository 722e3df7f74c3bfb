//! Command-line entry point: train, eval, ablate, export-relation.
//!
//! Exit codes: 0 success, 2 configuration or I/O problem, 3 numeric failure
//! during training.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cec_core::CecError;

#[derive(Parser)]
#[command(name = "cec", about = "Clustered-patch element connection workflows", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// JSON run configuration; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the episode count (training episodes for train/ablate,
    /// evaluation episodes for eval).
    #[arg(long)]
    episodes: Option<usize>,
    /// Override the numeric precision (f32 or f64).
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Base-train on synthetic episodes; writes ckpt.cec1 and metrics.csv.
    Train(CommonArgs),
    /// Evaluate a checkpoint on novel episodes.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to evaluate; defaults to <out>/ckpt.cec1.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also fine-tune a head per episode and report the combined score.
        #[arg(long)]
        finetune: bool,
    },
    /// Train/evaluate the attention x metric grid and the loss-weight grid.
    Ablate(CommonArgs),
    /// Export a relation map (PGM + CSV) and its query image for one episode.
    ExportRelation {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to visualize; defaults to <out>/ckpt.cec1.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Seed selecting the exported episode.
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
    },
}

fn exit_code_for(err: &CecError) -> u8 {
    match err {
        CecError::Training(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(common) => commands::train(&common),
        Command::Eval { common, checkpoint, finetune } => {
            commands::eval(&common, checkpoint.as_deref(), finetune)
        }
        Command::Ablate(common) => commands::ablate(&common),
        Command::ExportRelation { common, checkpoint, episode_seed } => {
            commands::export_relation(&common, checkpoint.as_deref(), episode_seed)
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

pub(crate) use CommonArgs as CommonArgsExport;
