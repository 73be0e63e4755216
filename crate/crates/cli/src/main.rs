//! `rawdiff`: batch front end for preparing data, training, fine-tuning,
//! denoising, evaluating and rendering.
//!
//! Failures print one line `error[<category>]: <message>` on stderr and exit
//! with 2 (usage), 3 (data) or 4 (numeric).

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rawdiff::noise::{NoiseLevel, PresetInterpretation};
use rawdiff::{Error, ErrorCategory, Result};

pub const BUILD_ID: &str = env!("RAWDIFF_BUILD");

#[derive(Parser)]
#[command(name = "rawdiff", version = concat!(env!("CARGO_PKG_VERSION"), " (", env!("RAWDIFF_BUILD"), ")"))]
#[command(about = "Diffusion denoising of raw Bayer images")]
struct Cli {
    /// Run all numerics on a single thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialise noisy/clean raw pairs from a manifest.
    Prepare(PrepareArgs),
    /// Train a denoiser on simulated noise.
    Train(TrainArgs),
    /// Fit LoRA adapters on captured pairs.
    Finetune(FinetuneArgs),
    /// Denoise raw files.
    Denoise(DenoiseArgs),
    /// Score a model (or the noisy inputs) on the test split.
    Evaluate(EvaluateArgs),
    /// Render a raw file to PNG.
    Render(RenderArgs),
    /// Write the procedural toy corpus.
    Toy(ToyArgs),
}

#[derive(Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fixed preset level (0.1 or 0.3). Default 0.1.
    #[arg(long, conflicts_with = "sampled")]
    pub noise_level: Option<NoiseLevel>,
    /// Draw per-image noise parameters from the prior instead.
    #[arg(long)]
    pub sampled: bool,
    #[arg(long, default_value = "linear")]
    pub preset_interpretation: PresetInterpretation,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `data.manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct FinetuneArgs {
    /// Base model checkpoint.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Adapter checkpoint trained against `--ckpt`.
    #[arg(long)]
    pub lora: Option<PathBuf>,
    /// A `.rdrw` file or a directory of them.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub embedding_file: Option<PathBuf>,
    #[arg(long)]
    pub embedding_index: Option<usize>,
    /// Use the unconditioned model's learned null vector.
    #[arg(long)]
    pub uncond: bool,
    /// Reverse steps; every training step when omitted.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Without a checkpoint the noisy inputs are scored as they are.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, requires = "ckpt")]
    pub lora: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Bits per PNG channel.
    #[arg(long, value_enum, default_value = "8")]
    pub depth: Depth,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Depth {
    #[value(name = "8")]
    Eight,
    #[value(name = "16")]
    Sixteen,
}

#[derive(Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training images per class.
    #[arg(long, default_value_t = 4)]
    pub train: usize,
    /// Test images per class.
    #[arg(long, default_value_t = 2)]
    pub test: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write simulated captured pairs instead of RGB images.
    #[arg(long)]
    pub pairs: bool,
    /// Shot coefficient of the pair noise.
    #[arg(long, default_value_t = 0.01)]
    pub shot: f64,
    /// Read coefficient of the pair noise.
    #[arg(long, default_value_t = 0.005)]
    pub read: f64,
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Usage => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
    }
}

fn report(category: ErrorCategory, msg: &str) -> ExitCode {
    let line = msg.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error[{}]: {line}", category.as_str());
    ExitCode::from(exit_code(category))
}

fn thread_count(deterministic: bool) -> Result<usize> {
    if deterministic {
        return Ok(1);
    }
    match std::env::var("RAWDIFF_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("RAWDIFF_THREADS={v:?} is not a thread count"))),
        Err(_) => Ok(0),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let threads = thread_count(cli.deterministic)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    match cli.command {
        Command::Prepare(a) => commands::prepare(&a),
        Command::Train(a) => commands::train(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Denoise(a) => commands::denoise(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Render(a) => commands::render(&a),
        Command::Toy(a) => commands::toy(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("bad arguments");
            return report(ErrorCategory::Usage, first.trim_start_matches("error: "));
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e.category(), &e.to_string()),
    }
}
