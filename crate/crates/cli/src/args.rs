use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use realign_core::embedstore::Template;
use realign_core::projection::Variant;
use realign_core::selftrain::Mode;

#[derive(Debug, Parser)]
#[command(name = "realign", version, about = "Realign and self-train vision-language embeddings without labels")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "RCLP_THREADS")]
    pub threads: Option<usize>,

    /// Raise log verbosity (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Project image embeddings onto the class-text span.
    Project(ProjectArgs),
    /// Label images by diffusing class texts over a nearest-neighbor graph.
    Propagate(PropagateArgs),
    /// Self-train both adapters and write a checkpoint bundle.
    Adapt(AdaptArgs),
    /// Score predictions, or predict with a checkpoint bundle first.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic benchmark and run self-training on it.
    BenchSynth(BenchSynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    P0,
    P1,
    P2,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::P0 => Variant::P0,
            VariantArg::P1 => Variant::P1,
            VariantArg::P2 => Variant::P2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TemplateArg {
    Single,
    Multi,
}

impl From<TemplateArg> for Template {
    fn from(t: TemplateArg) -> Self {
        match t {
            TemplateArg::Single => Template::Single,
            TemplateArg::Multi => Template::Multi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Transductive,
    Inductive,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Transductive => Mode::Transductive,
            ModeArg::Inductive => Mode::Inductive,
        }
    }
}

/// Image embeddings plus the class catalog they are scored against.
#[derive(Debug, Args)]
pub struct InputArgs {
    /// Image embeddings container.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Class catalog container.
    #[arg(long)]
    pub catalog: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value = "p1")]
    pub variant: VariantArg,
    /// Text set that spans the basis.
    #[arg(long, value_enum, default_value = "single")]
    pub template: TemplateArg,
    /// Output container for the projected images.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the basis container here.
    #[arg(long)]
    pub basis_out: Option<PathBuf>,
    /// Ground-truth labels; enables alignment statistics on stdout.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PropagateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value = "p2")]
    pub variant: VariantArg,
    #[arg(long, value_enum, default_value = "single")]
    pub template: TemplateArg,
    /// Output labels container.
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth labels; adds accuracy to the summary.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Write the normalized graph as a `row col value` edge list.
    #[arg(long)]
    pub edge_list: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Checkpoint bundle directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth labels of the adapted images, for the report only.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Held-out images scored with the frozen branches (inductive mode).
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    /// Ground-truth labels of the held-out images.
    #[arg(long, requires = "heldout")]
    pub heldout_labels: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Ground-truth labels.
    #[arg(long)]
    pub labels: PathBuf,
    /// Predicted labels container.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// Checkpoint bundle written by `adapt`.
    #[arg(long, requires_all = ["embeddings", "catalog"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Write the checkpoint's predictions here.
    #[arg(long, requires = "checkpoint")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchSynthArgs {
    /// Output directory for the dataset and reports.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub synth: SynthArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

/// Overrides of the reference synthetic benchmark.
#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of classes.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Images per class.
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Embedding dimension.
    #[arg(long)]
    pub dims: Option<usize>,
    /// Per-coordinate image noise.
    #[arg(long)]
    pub sigma_visual: Option<f64>,
    /// Per-coordinate text noise.
    #[arg(long)]
    pub sigma_text: Option<f64>,
    /// Length of the shared text offset.
    #[arg(long)]
    pub offset: Option<f64>,
    /// Prompt templates per class.
    #[arg(long)]
    pub templates: Option<usize>,
    /// Dataset seed; defaults to the run seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
}

/// Self-training settings. Precedence: flag, then `--config`, then defaults.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// JSON file with any subset of the settings below (snake_case keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// SGD learning rate [default: 1e-3].
    #[arg(long)]
    pub lr: Option<f64>,
    /// SGD momentum [default: 0.9].
    #[arg(long)]
    pub momentum: Option<f64>,
    /// L2 weight decay [default: 1e-4].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Images per step [default: 64, 32 above 200 classes].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Optimizer steps per branch before stopping [default: 5000].
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Training epochs; 0 reports only the starting point [default: 50].
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Propagation strength in [0, 1); 0 falls back to nearest text [default: 0.99].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Neighbors per node in the affinity graph [default: 20].
    #[arg(long)]
    pub k: Option<usize>,
    /// Power applied to kept similarities [default: 1].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Relative residual for the diffusion solve [default: 1e-6].
    #[arg(long)]
    pub cg_tol: Option<f64>,
    /// Iteration cap for the diffusion solve [default: 200].
    #[arg(long)]
    pub cg_max_iter: Option<usize>,
    /// Above this many classes, label by nearest text instead of propagating [default: 500].
    #[arg(long)]
    pub class_limit: Option<usize>,
    /// Cosine logit scale [default: 100].
    #[arg(long)]
    pub logit_scale: Option<f64>,
    /// Seed for batch order (and the synthetic data in bench-synth) [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// transductive adapts and labels the same images; inductive also labels --heldout.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Also train the adapter bias [default: false].
    #[arg(long)]
    pub train_bias: Option<bool>,
}
