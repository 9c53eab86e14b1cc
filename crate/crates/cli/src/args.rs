use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "gmnet", version, about = "Train and inspect grouped-merging conv nets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write metrics.csv, model.gmnt and model.cfg.
    Train(TrainArgs),
    /// Test error of a checkpoint.
    Eval(EvalArgs),
    /// Per-block parameter table.
    Params(ParamsArgs),
    /// Output shape of every block.
    Trace(TraceArgs),
    /// Dump feature maps of one test image as PGM files.
    Visualize(VisualizeArgs),
    /// Train each group setting in turn and write a combined CSV.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// MNIST, width 0.25, 5 epochs, batch 64.
    DeskMnist,
    /// CIFAR-10, width 0.25, 5 epochs, batch 64.
    DeskCifar,
}

/// Model description. Flags override `--config`, which overrides defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Flat `key = value` model config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// mnist, cifar10 or cifar100.
    #[arg(long)]
    pub dataset: Option<String>,
    /// gmnet or baseline.
    #[arg(long)]
    pub variant: Option<String>,
    /// A (dense), B (straight) or none.
    #[arg(long)]
    pub connection: Option<String>,
    /// sum or concat.
    #[arg(long)]
    pub merge: Option<String>,
    /// Channel multiplier.
    #[arg(long)]
    pub width: Option<f64>,
    /// Group preset: 8+4, 8+2, 4+4 or 8+4&16+8.
    #[arg(long)]
    pub groups: Option<String>,
    /// Where grouping applies: none, block1, block3 or both.
    #[arg(long)]
    pub placement: Option<String>,
    /// grouped or dense 1x1 bottlenecks.
    #[arg(long)]
    pub bottleneck: Option<String>,
    #[arg(long)]
    pub dropout_keep: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory holding the dataset files.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Use only the first N training images.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Use only the first N test images.
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Subtract channel means without dividing by the std.
    #[arg(long)]
    pub mean_only: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainOpts {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Disable pad/crop/flip augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Batches prepared ahead on a loader thread.
    #[arg(long, default_value_t = 0)]
    pub prefetch: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Output directory.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to load. `model.cfg` next to it is used when present.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Fail unless the total is within `--tol` (relative) of this value.
    #[arg(long)]
    pub assert_near: Option<f64>,
    #[arg(long, default_value_t = 0.10)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Also run a forward pass and compare every block's shape.
    #[arg(long)]
    pub check: bool,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
}

#[derive(Args, Debug)]
pub struct VisualizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test image index.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Comma-separated block names; defaults to the model's standard taps.
    #[arg(long, value_delimiter = ',')]
    pub taps: Vec<String>,
    #[arg(long, default_value = "maps")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Comma-separated subset of settings to run.
    #[arg(long, value_delimiter = ',')]
    pub settings: Vec<String>,
    #[arg(long, default_value = "ablation")]
    pub out: PathBuf,
}
