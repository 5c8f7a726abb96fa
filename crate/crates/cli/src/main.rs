// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

mod commands;

/// Aesthetic score-distribution prediction with confidence-interval ranking.
#[derive(Debug, Parser)]
#[command(name = "aesthetic-ci", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenSynth(GenSynthArgs),
    /// Train a model and write checkpoints, a log and a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Compare item pairs by predicted confidence intervals.
    Rank(RankArgs),
    /// Finite-difference check of the full model's gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of items.
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Channels per block.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    pub channels: u64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub blocks: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub spatial: u64,
    /// Observers per item.
    #[arg(long = "n-obs", default_value_t = 210, value_parser = clap::value_parser!(u32).range(1..))]
    pub n_obs: u32,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoints, log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub tau: Option<String>,
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long = "alpha-mu")]
    pub alpha_mu: Option<String>,
    #[arg(long = "alpha-sigma")]
    pub alpha_sigma: Option<String>,
    /// Seed for initialization and shuffling.
    #[arg(long)]
    pub seed: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("which").required(true).args(["pairs", "all_pairs"])))]
pub struct RankArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated `idA:idB` pairs.
    #[arg(long)]
    pub pairs: Option<String>,
    /// Every unordered pair of items in the dataset.
    #[arg(long = "all-pairs")]
    pub all_pairs: bool,
    #[arg(long, default_value_t = 1.96)]
    pub z: f64,
    /// Observer count assumed for every predicted interval.
    #[arg(long = "n-obs-assumed", default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    pub n_obs_assumed: u32,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// key=value file; `model.*` keys override the toy model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(a) => commands::gen_synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Rank(a) => commands::rank(&a),
        Command::GradCheck(a) => commands::grad_check(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
