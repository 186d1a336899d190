//! Command-line front end for the anomaly-detection pipeline.
//!
//! Every subcommand prints its primary report as pretty JSON on stdout;
//! `--out` additionally writes reports (and score tables where
//! applicable) to disk. Exit codes: 0 on success, 2 for input or
//! configuration problems, 3 for numeric failures such as divergence or
//! a failed gradient audit.

mod commands;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "apf",
    version,
    about = "Spectral anomaly detection on attributed graphs"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Summarize a bundle: counts, homophily, spectral-energy statistics.
    Stats(StatsArgs),
    /// Synthetic block-model graphs and the separability harness.
    #[command(subcommand)]
    Asbm(AsbmCommand),
    /// Populate a bundle's subgraph cache.
    Sample(SampleArgs),
    /// Pretrain the two spectral encoders contrastively.
    Pretrain(PretrainArgs),
    /// Fine-tune the fusion head on a pretraining checkpoint.
    Finetune(FinetuneArgs),
    /// Re-score a bundle from saved checkpoints.
    Eval(EvalArgs),
    /// Full multi-seed pipeline with aggregate reports.
    Run(RunArgs),
    /// Finite-difference audit of every gradient path.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand)]
enum AsbmCommand {
    /// Generate an instance and save it as a bundle.
    Gen(AsbmGenArgs),
    /// Monte-Carlo check that pattern-aware filtering separates the classes.
    Verify(AsbmVerifyArgs),
}

#[derive(Args)]
struct StatsArgs {
    /// Bundle directory.
    #[arg(long)]
    bundle: PathBuf,
    /// Directory to write stats.json into.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AsbmGenArgs {
    /// Generator spec as JSON; omitted uses the built-in benchmark regime.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Destination bundle directory.
    #[arg(long)]
    out: PathBuf,
    /// Store features as compact binary f32 instead of text.
    #[arg(long)]
    binary_features: bool,
}

#[derive(Args)]
struct AsbmVerifyArgs {
    /// Generator spec as JSON; omitted uses the built-in benchmark regime.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Monte-Carlo trials.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Scale of the separator direction.
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    /// Directory to write separability.json into.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Bundle directory.
    #[arg(long)]
    bundle: PathBuf,
    /// Experiment config as JSON (sampler settings and feature flags).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Bundle directory.
    #[arg(long)]
    bundle: PathBuf,
    /// Experiment config as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the pretraining seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for pretrain.ckpt and pretrain.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Bundle directory.
    #[arg(long)]
    bundle: PathBuf,
    /// Experiment config as JSON (fine-tune and split settings).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the label split and head initialization.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding pretrain.ckpt and pretrain.json.
    #[arg(long)]
    pretrained: PathBuf,
    /// Directory for finetune.ckpt, finetune.json, and scores.csv.
    #[arg(long)]
    out: PathBuf,
    /// Draw validation labels from the training pool instead of disjointly.
    #[arg(long)]
    shared_val: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Bundle directory.
    #[arg(long)]
    bundle: PathBuf,
    /// Directory holding pretrain.ckpt and pretrain.json.
    #[arg(long)]
    pretrained: PathBuf,
    /// Directory holding finetune.ckpt and finetune.json.
    #[arg(long)]
    finetuned: PathBuf,
    /// Overrides the split seed recorded at fine-tune time.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for eval.json and scores.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Bundle directory.
    #[arg(long)]
    bundle: PathBuf,
    /// Experiment config as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for aggregate.json and per-seed artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seeds on parallel workers.
    #[arg(long)]
    parallel_seeds: bool,
    /// Draw validation labels from the training pool instead of disjointly.
    #[arg(long)]
    shared_val: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the randomized check instances.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory to write gradcheck.json into.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: could not size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Stats(args) => commands::stats(&args),
        Command::Asbm(AsbmCommand::Gen(args)) => commands::asbm_gen(&args),
        Command::Asbm(AsbmCommand::Verify(args)) => commands::asbm_verify(&args),
        Command::Sample(args) => commands::sample(&args),
        Command::Pretrain(args) => commands::pretrain(&args),
        Command::Finetune(args) => commands::finetune(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Run(args) => commands::run(&args),
        Command::Gradcheck(args) => commands::gradcheck(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
