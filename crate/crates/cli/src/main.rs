use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tgcritic_core::model::ModelConfig;
use tgcritic_core::train::Strategy;

mod annotate;
mod cache;
mod extract;
mod manifest;
mod score;
mod selfcheck;
mod train;

/// Bad inputs (manifests, audio, flags). Everything else exits with status 2.
#[derive(Debug)]
pub struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "tgcritic", version, about = "Singing quality assessment from the command line")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute and cache CQT and timbre features for every song in a manifest.
    Extract(ExtractArgs),
    /// Train a model on a labeled manifest.
    Train(TrainArgs),
    /// Score songs with a trained checkpoint.
    Score(ScoreArgs),
    /// Run the iterative automatic annotation loop.
    Annotate(AnnotateArgs),
    /// Gradient checks, shape laws and other built-in sanity checks.
    Selfcheck,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Narrow stage channels; practical on one core.
    Desk,
    /// Full-width network.
    Full,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model configuration JSON; overrides --preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
}

impl ModelArgs {
    pub fn resolve(&self, seed: u64) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| input_error(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| input_error(format!("{}: {e}", p.display())))?
            }
            None => match self.preset {
                Preset::Desk => ModelConfig::desk(seed),
                Preset::Full => ModelConfig::full(seed),
            },
        };
        cfg.seed = seed;
        cfg.validate().map_err(|e| input_error(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Recompute even when the cache is current.
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Divides epochs and batches per epoch of the full schedule.
    #[arg(long, default_value_t = 10)]
    pub scale: usize,
    #[arg(long, default_value = "one_step")]
    pub strategy: Strategy,
    /// Stop a step early once training accuracy reaches this value.
    #[arg(long)]
    pub target_accuracy: Option<f64>,
    /// Fraction of each class held out for validation.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// A single WAV file.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub audio: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory for one JSON file per song; JSON lines on stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Edge-pad songs shorter than one analysis window instead of failing.
    #[arg(long)]
    pub pad_short: bool,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// Manually labeled seed set.
    #[arg(long, required_unless_present = "synthetic")]
    pub seed_manifest: Option<PathBuf>,
    /// Unlabeled pool.
    #[arg(long, required_unless_present = "synthetic")]
    pub pool_manifest: Option<PathBuf>,
    /// Optional hidden labels for the pool (JSON lines of sample_id and label).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Generate the synthetic corpus into --out first, then run on it.
    #[arg(long)]
    pub synthetic: bool,
    /// Seed-set size for --synthetic.
    #[arg(long, default_value_t = 90)]
    pub n_seed: usize,
    /// Pool size for --synthetic.
    #[arg(long, default_value_t = 900)]
    pub n_pool: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub iterations: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Schedule divisor for the per-iteration network.
    #[arg(long, default_value_t = 50)]
    pub scale: usize,
    #[arg(long, default_value = "one_step")]
    pub strategy: Strategy,
    /// Train each iteration's network from scratch instead of from the previous one.
    #[arg(long)]
    pub cold_start: bool,
    /// Probability threshold of the label rule.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub force: bool,
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TGC_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| input_error(format!("TGC_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    match cli.command {
        Command::Extract(a) => extract::run(&a),
        Command::Train(a) => train::run(&a).map(|_| true),
        Command::Score(a) => score::run(&a).map(|_| true),
        Command::Annotate(a) => annotate::run(&a).map(|_| true),
        Command::Selfcheck => selfcheck::run(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        // reported failures (extraction errors, failed checks)
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
