mod commands;
mod datasets;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pcaps_core::model::{preset, ModelConfig};
use pcaps_core::{Error, ErrorKind, Result};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "pcaps", version, about = "Routing-free capsule networks on the CPU")]
struct Cli {
    /// Worker threads (default: physical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Seed for initialization, sampling, augmentation and attacks.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints, metrics and a manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Per-layer and total parameter counts.
    Params(ModelArgs),
    /// Time training iterations over batch sizes and thread counts.
    Bench(BenchArgs),
    /// Filter correlations, generalization gap and FGSM sweep.
    Analyze(AnalyzeArgs),
    /// Fit the GCN + ZCA preprocessing on CIFAR-10 training images.
    Prep(PrepArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Built-in architecture (p0..p4, toy; `pN-as-listed` is accepted).
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Model file in TOML.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ModelArgs {
    pub fn resolve(&self, fallback: &str) -> Result<ModelConfig> {
        match (&self.preset, &self.config) {
            (_, Some(path)) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    context: format!("reading {}", path.display()),
                    source: e,
                })?;
                ModelConfig::from_toml(&text)
            }
            (Some(name), None) => preset(name),
            (None, None) => preset(fallback),
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset (default: inferred from the model input).
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Directory holding the dataset files (default: `$PCAPS_DATA_DIR/<dataset>`,
    /// else `data/<dataset>`).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Saved CIFAR-10 whitening transform (from `prep`).
    #[arg(long)]
    pub zca: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Training iterations (minibatches).
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Halve the learning rate every this many iterations.
    #[arg(long)]
    pub decay_every: Option<usize>,
    /// Evaluation cadence; 0 evaluates only at the start and the end.
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Training images scored at each evaluation.
    #[arg(long)]
    pub eval_train: Option<usize>,
    /// Test images scored at each evaluation (default: all).
    #[arg(long)]
    pub eval_test: Option<usize>,
    /// Use only the first N training images.
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: OptimizerArg,
    /// Global gradient-norm ceiling.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Disable training-time augmentation.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    /// Continue from this checkpoint (same seed, model and optimizer).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Suppress per-evaluation progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Score only the first N images.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Check at most this many kernel entries per layer (and input entries).
    #[arg(long)]
    pub max_per_layer: Option<usize>,
    /// Also write the results as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Batch sizes: a list (`50,100,150,200`) or a range split into four
    /// even steps (`50..200`).
    #[arg(long, default_value = "50,100,150,200")]
    pub batch: String,
    /// Thread counts to compare (default: 1 and `--threads`).
    #[arg(long, value_delimiter = ',')]
    pub thread_counts: Option<Vec<usize>>,
    /// Timed iterations per cell.
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    /// Directory for `bench.json`, `bench.md` and the manifest.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Metric log for the gap series (default: `metrics.csv` beside the
    /// checkpoint's run directory).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Points averaged for the terminal gap.
    #[arg(long, default_value_t = 5)]
    pub gap_window: usize,
    #[command(flatten)]
    pub data: DataArgs,
    /// Test images attacked (default 1000).
    #[arg(long, default_value_t = 1000)]
    pub fgsm_samples: usize,
    /// Attack strengths.
    #[arg(long, value_delimiter = ',', default_values_t = pcaps_core::analysis::FGSM_EPSILONS)]
    pub epsilons: Vec<f64>,
    /// Skip the FGSM sweep (no dataset needed).
    #[arg(long)]
    pub no_fgsm: bool,
}

#[derive(Args, Debug)]
pub struct PrepArgs {
    /// CIFAR-10 directory.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Output transform file.
    #[arg(long)]
    pub out: PathBuf,
    /// Training images sampled for the fit.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numeric => EXIT_NUMERIC,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.unwrap_or_else(num_cpus::get_physical).max(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let ctx = commands::Context {
        seed: cli.seed,
        threads,
        argv: std::env::args().collect(),
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
        Command::Params(a) => commands::params(&a),
        Command::Bench(a) => commands::bench(&ctx, a),
        Command::Analyze(a) => commands::analyze(&ctx, a),
        Command::Prep(a) => commands::prep(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
