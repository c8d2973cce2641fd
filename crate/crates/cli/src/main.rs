//! `sketchret`: generate data, train, index, query, evaluate and serve.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit status for bad flags or arguments.
const EXIT_USAGE: u8 = 2;
/// Missing or malformed files, datasets and configs.
const EXIT_DATA: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "sketchret", version, about = "Sketch-to-image retrieval")]
pub struct Cli {
    /// Log progress at info level (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a procedural shape dataset.
    GenData(GenDataArgs),
    /// Train on the seen classes of one fold.
    Train(TrainArgs),
    /// Encode every image of a dataset into a retrieval index.
    BuildIndex(BuildIndexArgs),
    /// Rank indexed images for one sketch.
    Query(QueryArgs),
    /// Score seen and unseen retrieval on one fold.
    Evaluate(EvaluateArgs),
    /// Run the HTTP query service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 12)]
    sketches: usize,
    #[arg(long, default_value_t = 24)]
    images: usize,
    /// Raster side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// 64×64 inputs, d = 32, two blocks.
    Toy,
    /// 224×224 inputs, d = 768, twelve blocks.
    Base,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fold: Option<String>,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Loss CSV path (default: next to the checkpoint).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Replace the config's model architecture with a preset.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct BuildIndexArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    sketch: PathBuf,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    /// Rescore this many leading candidates with cross-attention.
    #[arg(long, requires = "data")]
    rerank: Option<usize>,
    /// Dataset root for loading images during reranking.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Start even if the index was built by a different checkpoint.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, required_unless_present = "oracle")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Fold id; defaults to the checkpoint's training fold.
    #[arg(long)]
    fold: Option<String>,
    /// Split seed; defaults to the checkpoint's training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rerank: Option<usize>,
    /// JSON report path.
    #[arg(long, default_value = "eval-report.json")]
    report: PathBuf,
    /// Score a one-hot label embedding instead of a checkpoint. Every
    /// metric should read 1 except Top-K beyond the per-class gallery size.
    #[arg(long, conflicts_with_all = ["ckpt", "rerank"])]
    oracle: bool,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's bind address.
    #[arg(long)]
    bind: Option<String>,
    /// Start even if the index was built by a different checkpoint.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let default_level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level)).init();

    let outcome = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::BuildIndex(a) => commands::build_index(a),
        Command::Query(a) => commands::query(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Serve(a) => commands::serve(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
