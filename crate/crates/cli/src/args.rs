use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tipcache::{Optimizer, ReportFormat, Unfreeze};

#[derive(Debug, Parser)]
#[command(
    name = "tipcache",
    version,
    about = "Few-shot classification over frozen embeddings with a training-free key-value cache"
)]
pub struct Cli {
    /// Worker threads for parallel kernels (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic few-shot task as TIPEMB files.
    Synth(SynthArgs),
    /// Build a cache from a training set and save it to a directory.
    BuildCache(BuildCacheArgs),
    /// Evaluate a classifier on a test set.
    Eval(EvalArgs),
    /// Train a cache (or a baseline) and optionally evaluate it.
    Finetune(FinetuneArgs),
    /// Select alpha and beta on a held-out split, then evaluate once on test.
    Sweep(SweepArgs),
    /// Run one of the standard ablations.
    Ablate(AblateArgs),
    /// Convert report files between CSV and JSON, concatenating inputs.
    ExportReport(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

impl FormatArg {
    pub fn extension(self) -> &'static str {
        match self {
            FormatArg::Csv => "csv",
            FormatArg::Json => "json",
        }
    }
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Directory for report and index files.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Report encoding for stdout and the report file.
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
    /// Extra held-out samples per class written to val.emb (0 = none).
    #[arg(long, default_value_t = 0)]
    pub val_per_class: usize,
    /// Per-coordinate noise standard deviation.
    #[arg(long, default_value_t = 0.3)]
    pub sigma: f64,
    /// Blend weight of the random direction in each classifier row.
    #[arg(long, default_value_t = 0.4)]
    pub misalignment: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for train.emb, test.emb, clf.emb (and val.emb).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildCacheArgs {
    /// Training embeddings (TIPEMB).
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long, default_value_t = tipcache::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = tipcache::DEFAULT_BETA)]
    pub beta: f64,
    /// Shrink each class to this many prototypes before caching.
    #[arg(long, value_name = "K")]
    pub cache_size: Option<usize>,
    /// Seed for prototype grouping.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cache directory to write.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    /// Cache blended with the zero-shot classifier.
    Tip,
    /// Same prediction computed through the two-layer adapter form.
    TipMlp,
    /// Zero-shot classifier only.
    Zeroshot,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Training embeddings to build the cache from.
    #[arg(long, conflicts_with = "cache")]
    pub train: Option<PathBuf>,
    /// Saved cache directory (from build-cache or finetune).
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub clf: PathBuf,
    /// Residual ratio; defaults to the cache's own value or 1.0.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Sharpness ratio; defaults to the cache's own value or 5.5.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_enum, default_value_t = EvalMode::Tip)]
    pub mode: EvalMode,
    /// Recorded in the report.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    SgdMomentum,
    Adam,
}

impl From<OptimizerArg> for Optimizer {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::SgdMomentum => Optimizer::sgd_momentum(),
            OptimizerArg::Adam => Optimizer::adam(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UnfreezeArg {
    Keys,
    Values,
    Both,
}

impl From<UnfreezeArg> for Unfreeze {
    fn from(u: UnfreezeArg) -> Self {
        match u {
            UnfreezeArg::Keys => Unfreeze::KEYS,
            UnfreezeArg::Values => Unfreeze::VALUES,
            UnfreezeArg::Both => Unfreeze::BOTH,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training epochs (default: 20, or 200 for clip-adapter; step budget
    /// for linear-probe).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    /// Base learning rate of the cosine schedule.
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::SgdMomentum)]
    pub optimizer: OptimizerArg,
    /// Cache blocks updated by gradient descent.
    #[arg(long, value_enum, default_value_t = UnfreezeArg::Keys)]
    pub unfreeze: UnfreezeArg,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    /// Fine-tune the cache blocks.
    TipAdapterF,
    /// Residual bottleneck adapter baseline.
    ClipAdapter,
    /// L2-regularized logistic regression baseline.
    LinearProbe,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Test embeddings; when given, the trained model is evaluated.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub clf: PathBuf,
    /// Residual ratio (default: 1.0, or 0.5 for clip-adapter).
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = tipcache::DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, value_enum, default_value_t = Method::TipAdapterF)]
    pub method: Method,
    /// Bottleneck width for clip-adapter (default: dim / 4).
    #[arg(long)]
    pub hidden: Option<usize>,
    /// L2 strength for linear-probe.
    #[arg(long, default_value_t = 1e-3)]
    pub l2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub train_args: TrainArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectionArg {
    /// Held-out validation split, falling back to train when absent.
    Val,
    /// Training set.
    Train,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Held-out split used for selection.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub clf: PathBuf,
    /// Comma-separated alpha grid (default: 0,0.5,1,2,3,4).
    #[arg(long = "alpha", value_delimiter = ',')]
    pub alphas: Vec<f64>,
    /// Comma-separated beta grid (default: 1.5,3.5,...,11.5).
    #[arg(long = "beta", value_delimiter = ',')]
    pub betas: Vec<f64>,
    #[arg(long, value_enum, default_value_t = SelectionArg::Val)]
    pub selection: SelectionArg,
    /// Recorded in the report.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    Alpha,
    Beta,
    CacheSize,
    MoreShots,
    FinetuneModules,
}

impl From<AblationArg> for tipcache::Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Alpha => tipcache::Ablation::Alpha,
            AblationArg::Beta => tipcache::Ablation::Beta,
            AblationArg::CacheSize => tipcache::Ablation::CacheSize,
            AblationArg::MoreShots => tipcache::Ablation::MoreShots,
            AblationArg::FinetuneModules => tipcache::Ablation::FinetuneModules,
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub name: AblationArg,
    /// Few-shot training set (the sampling pool for more-shots).
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub clf: PathBuf,
    #[arg(long, default_value_t = tipcache::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = tipcache::DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub train_args: TrainArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Report files (.json or .csv) to concatenate.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
    /// Output file (default: stdout).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}
