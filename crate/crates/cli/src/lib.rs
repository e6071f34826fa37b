//! Command-line front end: argument parsing, config files, run directories
//! and exit codes.

pub mod commands;
pub mod config;
pub mod fail;
pub mod output;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::commands::Common;
use crate::output::Staging;

#[derive(Parser, Debug)]
#[command(
    name = "ctxprune",
    version,
    about = "Contextualized visual-token pruning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// TOML config; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; falls back to $CTXPRUNE_OUT.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the command's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic needle dataset.
    GenData(CommonArgs),
    /// Train the toy language model on a dataset.
    TrainBase(CommonArgs),
    /// Fit the classifier to attention labels.
    TrainStage1(CommonArgs),
    /// Train the classifier through the soft attention mask.
    TrainStage2(CommonArgs),
    /// Accuracy per prune mode and ratio.
    Eval(CommonArgs),
    /// Cost and timing across prompt sizes.
    Bench(CommonArgs),
    /// Cost, timing and accuracy across ratios at the dataset's size.
    Sweep(CommonArgs),
    /// Finite-difference check of the training losses.
    GradCheck(CommonArgs),
    /// Accuracy of in-decoder pruning over prune and guidance layers.
    ReproPrelim(CommonArgs),
}

/// Runs one parsed command and returns its output directory.
pub fn run(cli: Cli) -> Result<PathBuf> {
    let (f, a): (fn(Common) -> Result<PathBuf>, CommonArgs) = match cli.command {
        Command::GenData(a) => (commands::gen_data, a),
        Command::TrainBase(a) => (commands::train_base_cmd, a),
        Command::TrainStage1(a) => (commands::train_stage1_cmd, a),
        Command::TrainStage2(a) => (commands::train_stage2_cmd, a),
        Command::Eval(a) => (commands::eval_cmd, a),
        Command::Bench(a) => (commands::bench_cmd, a),
        Command::Sweep(a) => (commands::sweep_cmd, a),
        Command::GradCheck(a) => (commands::grad_check_cmd, a),
        Command::ReproPrelim(a) => (commands::repro_prelim_cmd, a),
    };
    let common = Common {
        config: a.config,
        out: Staging::resolve_out(a.out)?,
        seed: a.seed,
        force: a.force,
    };
    f(common)
}
