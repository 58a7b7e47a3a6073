//! `refh`: experiment runner for recurrent harmonium filtering models.
//!
//! Subcommands generate synthetic datasets, train models, evaluate
//! checkpoints against held-out data, benchmark the linear baselines, and
//! generate trajectories from trained models. Every command is deterministic
//! given its config and seed; reruns produce byte-identical outputs.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::GenDirection;

#[derive(Parser)]
#[command(
    name = "refh",
    version,
    about = "Train and evaluate recurrent harmonium filters on synthetic tracking tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the config-driven subcommands.
#[derive(Args)]
struct ConfigArgs {
    /// Path to a TOML experiment config.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Name of a built-in preset (alternative to --config).
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Override the experiment seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Directory to write outputs into (created if missing).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<config::ExperimentConfig> {
        config::resolve(self.config.as_deref(), self.preset.as_deref(), self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from the configured world and write it as CSV.
    Generate {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Train a model, checkpointing at every batch renewal.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Continue from the train-state snapshot in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on held-out data.
    Evaluate {
        #[command(flatten)]
        common: ConfigArgs,
        /// Checkpoint file to evaluate.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Also report the linear-baseline filters (ring task).
        #[arg(long)]
        with_baselines: bool,
    },
    /// Run the linear-baseline suite (ring task) with per-restart rows.
    Benchmark {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Generate observation trajectories from a trained model.
    GenTraj {
        /// Checkpoint file to generate from.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Directory to write outputs into (created if missing).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Chain direction.
        #[arg(long, value_enum, default_value = "reverse")]
        direction: GenDirection,
        /// Number of frames to generate.
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Gibbs cycles per frame (forward direction only).
        #[arg(long, default_value_t = 50)]
        gibbs: usize,
        /// Generation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { common } => {
            let cfg = common.resolve()?;
            commands::cmd_generate(&cfg, &common.out)
        }
        Command::Train { common, resume } => {
            let cfg = common.resolve()?;
            commands::cmd_train(&cfg, &common.out, resume)
        }
        Command::Evaluate {
            common,
            checkpoint,
            with_baselines,
        } => {
            let cfg = common.resolve()?;
            commands::cmd_evaluate(&cfg, &checkpoint, &common.out, with_baselines)
        }
        Command::Benchmark { common } => {
            let cfg = common.resolve()?;
            commands::cmd_benchmark(&cfg, &common.out)
        }
        Command::GenTraj {
            checkpoint,
            out,
            direction,
            steps,
            gibbs,
            seed,
        } => commands::cmd_gen_traj(&checkpoint, &out, direction, steps, gibbs, seed),
    }
}
