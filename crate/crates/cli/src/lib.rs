//! Command-line driver for the noisy-label toy benchmark.

mod commands;
pub mod reproduce;
pub mod svg;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{noise_seed, SAMPLE_FILE_PREFIX, TRAIN_LOG};

/// Environment variable that replaces the default output root.
pub const OUT_ENV: &str = "ROBUST_DIFF_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// A bad flag value or flag combination; reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

macro_rules! usage {
    ($($arg:tt)*) => {
        anyhow::Error::new($crate::UsageError(format!($($arg)*)))
    };
}
pub(crate) use usage;

#[derive(Debug, Parser)]
#[command(name = "robust-diff", version, about = "Noisy-label robust conditional diffusion on a 2-D toy benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a four-class toy dataset with injected label noise.
    GenData(GenDataArgs),
    /// Train a model on a dataset file.
    Train(TrainArgs),
    /// Draw class-conditional samples from a checkpoint.
    Sample(SampleArgs),
    /// Score a sample directory against the clean labels of a dataset.
    Eval(EvalArgs),
    /// Run the full noise sweep and write tables and plots.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    pub n_per_class: usize,
    /// `sym` or `asym`.
    #[arg(long, default_value = "sym")]
    pub noise: String,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class pairs for asymmetric noise, e.g. `0-1,2-3`.
    #[arg(long)]
    pub pairs: Option<String>,
    /// Dataset file; defaults to `<out root>/data.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Flat `key=value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub total_iters: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Checkpoint directory; defaults to `<out root>/train`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Guidance scale; defaults to the checkpoint's configured value.
    #[arg(long)]
    pub guidance_w: Option<f64>,
    /// Sample directory; defaults to `<out root>/samples`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a scatter plot colored by conditioning class.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset file whose clean labels define the references.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `sample`.
    #[arg(long)]
    pub samples: PathBuf,
    /// Append a results-table record here (needs --variant, --eta, --seed).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, default_value = "sym")]
    pub noise: String,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    /// Re-run exactly what an earlier manifest describes.
    #[arg(long, conflicts_with_all = ["config", "out", "seeds", "etas", "variants", "noise", "n_per_class", "total_iters", "eval_per_class", "curve_every", "overrides"])]
    pub manifest: Option<PathBuf>,
    /// Flat `key=value` file with training and sweep keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to `<out root>/reproduce`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Comma-separated noise rates.
    #[arg(long)]
    pub etas: Option<String>,
    /// Comma-separated variants.
    #[arg(long)]
    pub variants: Option<String>,
    #[arg(long)]
    pub noise: Option<String>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub total_iters: Option<usize>,
    #[arg(long)]
    pub eval_per_class: Option<usize>,
    /// Iterations between controllability-curve points.
    #[arg(long)]
    pub curve_every: Option<usize>,
    /// Any training or sweep key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

/// Output root: `ROBUST_DIFF_OUT` if set, else `runs`.
pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<i32> {
    match command {
        Command::GenData(a) => commands::gen_data(&a).map(|_| EXIT_OK),
        Command::Train(a) => commands::train(&a).map(|_| EXIT_OK),
        Command::Sample(a) => commands::sample(&a).map(|_| EXIT_OK),
        Command::Eval(a) => commands::eval(&a).map(|_| EXIT_OK),
        Command::Reproduce(a) => reproduce::cmd_reproduce(&a),
    }
}
