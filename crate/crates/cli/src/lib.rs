//! `carprune` command-line driver: training presets, filter scoring, greedy
//! pruning, interpretation reports and index benchmarks.
//!
//! Every run writes its outputs plus a `run.json` manifest echoing the fully
//! resolved configuration into the output directory.

pub mod commands;
pub mod datasets;
pub mod error;
pub mod presets;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use carprune::{Network, Result as CoreResult};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Serialize, Serializer};

pub use crate::datasets::{DatasetKind, Split};
pub use crate::error::{CliError, CliResult};
pub use crate::presets::Preset;

/// Output directory used when neither `--out` nor the environment sets one.
pub const OUT_DIR_ENV: &str = "CARPRUNE_OUT_DIR";

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "carprune",
    version,
    about = "CAR-based filter scoring and greedy CNN pruning"
)]
pub struct Cli {
    /// Seed for initialization, shuffling and subset sampling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for evaluation and scoring (default: available cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "carprune-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Train an architecture preset from scratch.
    Train(TrainArgs),
    /// Score every filter of one conv layer.
    Score(ScoreArgs),
    /// Greedily prune filters and write the compacted model, trace and report.
    Prune(PruneArgs),
    /// Patch, class-comparison and class-label reports.
    #[command(subcommand)]
    Interpret(InterpretCommand),
    /// Prune the same model with several indexes under one filter budget.
    Compare(CompareArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Score(_) => "score",
            Command::Prune(_) => "prune",
            Command::Interpret(InterpretCommand::Patches(_)) => "interpret patches",
            Command::Interpret(InterpretCommand::ClassCompare(_)) => "interpret class-compare",
            Command::Interpret(InterpretCommand::ClassLabels(_)) => "interpret class-labels",
            Command::Compare(_) => "compare",
        }
    }
}

/// A conv layer given as `convN` (1-based among conv layers) or a raw layer index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerArg {
    Conv(usize),
    Index(usize),
}

impl LayerArg {
    pub fn resolve(self, net: &Network) -> CoreResult<usize> {
        let layer = match self {
            LayerArg::Index(i) => i,
            LayerArg::Conv(n) => {
                let convs = net.conv_layers();
                *n.checked_sub(1).and_then(|k| convs.get(k)).ok_or_else(|| {
                    carprune::Error::InvalidArgument(format!(
                        "conv{n} requested but the network has {} conv layers",
                        convs.len()
                    ))
                })?
            }
        };
        net.filter_count(layer)?;
        Ok(layer)
    }
}

impl FromStr for LayerArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("expected convN or a layer index, got {s:?}");
        match s.strip_prefix("conv") {
            Some(n) => match n.parse::<usize>() {
                Ok(n) if n >= 1 => Ok(LayerArg::Conv(n)),
                _ => Err(bad()),
            },
            None => s.parse().map(LayerArg::Index).map_err(|_| bad()),
        }
    }
}

impl fmt::Display for LayerArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerArg::Conv(n) => write!(f, "conv{n}"),
            LayerArg::Index(i) => write!(f, "{i}"),
        }
    }
}

impl Serialize for LayerArg {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Directory holding the dataset files (not needed by weight indexes).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Dataset format (default: inferred from the model's input shape).
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Split used for evaluation and scoring.
    #[arg(long, value_enum, default_value = "test")]
    pub eval_split: Split,
    /// Stratified subset size of the evaluation split.
    #[arg(long)]
    pub eval_subset: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SgdArgs {
    #[arg(long, default_value_t = 0.05)]
    pub lr: f32,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Stratified subset size of the training split.
    #[arg(long)]
    pub train_subset: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub preset: Preset,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[command(flatten)]
    pub sgd: SgdArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreIndex {
    Car,
    CarClass,
    WeightIn,
    WeightOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneIndex {
    Car,
    WeightIn,
    WeightOut,
}

impl PruneIndex {
    pub fn index(self) -> carprune::ImportanceIndex {
        match self {
            PruneIndex::Car => carprune::ImportanceIndex::Car,
            PruneIndex::WeightIn => carprune::ImportanceIndex::WeightIncoming,
            PruneIndex::WeightOut => carprune::ImportanceIndex::WeightOutgoing,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub layer: LayerArg,
    #[arg(long, value_enum, default_value = "car")]
    pub index: ScoreIndex,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PruneLoopArgs {
    /// Conv layers to prune, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub layers: Vec<LayerArg>,
    /// Epochs of fine-tuning after each tentative prune (0 disables it).
    #[arg(long, default_value_t = 0)]
    pub finetune_epochs: usize,
    /// Score once up front instead of after every committed prune.
    #[arg(long)]
    pub no_rescore: bool,
    /// Physically remove committed filters before the next iteration.
    #[arg(long)]
    pub compact_between: bool,
    #[command(flatten)]
    pub sgd: SgdArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "car")]
    pub index: PruneIndex,
    /// Keep pruning while accuracy >= rho x uncompressed accuracy.
    #[arg(long, conflicts_with_all = ["budget", "exhaustive"])]
    pub rho: Option<f64>,
    /// Prune exactly this many filters per target layer.
    #[arg(long, conflicts_with = "exhaustive")]
    pub budget: Option<usize>,
    /// Prune until every target layer is down to one filter.
    #[arg(long)]
    pub exhaustive: bool,
    #[command(flatten)]
    pub prune: PruneLoopArgs,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpretCommand {
    /// Top-K input patches per filter by pre-activation response.
    Patches(PatchesArgs),
    /// Per-class accuracy of two models on the same data.
    ClassCompare(ClassCompareArgs),
    /// Classes with the highest and lowest per-class CAR for each filter.
    ClassLabels(ClassLabelsArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PatchesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub layer: LayerArg,
    #[arg(long, default_value_t = carprune::interpret::DEFAULT_TOP_K)]
    pub k: usize,
    /// Also write each patch's pixels to `patch_pixels.jsonl`.
    #[arg(long)]
    pub dump_crops: bool,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ClassCompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub model_b: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ClassLabelsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub layer: LayerArg,
    #[arg(long, default_value_t = carprune::interpret::DEFAULT_TOP_CLASSES)]
    pub t: usize,
    /// Only this filter (default: every filter of the layer).
    #[arg(long)]
    pub filter: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Filters pruned per target layer by every index.
    #[arg(long)]
    pub budget: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "car,weight-in,weight-out")]
    pub indexes: Vec<PruneIndex>,
    #[command(flatten)]
    pub prune: PruneLoopArgs,
}

/// Runs a parsed command inside a worker pool of the requested size.
pub fn run(cli: &Cli) -> CliResult<commands::RunSummary> {
    let workers = match cli.workers {
        Some(0) => return Err(CliError::Usage("--workers must be at least 1".into())),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    pool.install(|| commands::execute(cli, workers))
}
