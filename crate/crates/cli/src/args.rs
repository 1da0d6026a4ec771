use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use emmpd::data::{SyntheticSpec, TaskMode};
use emmpd::fusion::{FusionKind, GraphPlacement};
use emmpd::select::SelectionMode;
use emmpd::train::ablation::AblationMode;
use emmpd::train::config::TrainConfig;

#[derive(Debug, Parser)]
#[command(name = "emmpd", version, about = "Patch selection and graph/text fusion for multi-slide bag classification")]
pub struct Cli {
    /// Worker threads for per-bag stages (1 keeps runs reproducible)
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset (bags, text bank, manifest)
    Synth(SynthArgs),
    /// Run 2D window compression and report removal rates
    Compress(CompressArgs),
    /// Train selector and fusion model; writes checkpoint and history
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split
    Eval(EvalArgs),
    /// Train and rank a family of config variants
    Ablate(AblateArgs),
    /// Finite-difference check of every parameter group
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SyntheticSpec::default().num_patients)]
    pub patients: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().classes)]
    pub classes: usize,
    /// Embedding width
    #[arg(long, default_value_t = SyntheticSpec::default().d)]
    pub d: usize,
    /// Fraction of patches that are near-duplicates of a neighbour, in [0, 1)
    #[arg(long, default_value_t = SyntheticSpec::default().dup_ratio)]
    pub dup_ratio: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().slides_per_patient.0)]
    pub slides_min: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().slides_per_patient.1)]
    pub slides_max: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().patches_per_slide.0)]
    pub patches_min: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().patches_per_slide.1)]
    pub patches_max: usize,
    /// Class-signature strength
    #[arg(long, default_value_t = SyntheticSpec::default().signal)]
    pub signal: f64,
    /// Noise scale
    #[arg(long, default_value_t = SyntheticSpec::default().noise)]
    pub noise: f64,
    /// Per-class probability of being present
    #[arg(long, default_value_t = SyntheticSpec::default().prevalence)]
    pub prevalence: f64,
    /// Side of the planted square cluster
    #[arg(long, default_value_t = SyntheticSpec::default().cluster)]
    pub cluster: usize,
    #[arg(long, default_value = "multilabel")]
    pub task_mode: TaskMode,
    /// Learnable prompt rows recorded in the manifest
    #[arg(long, default_value_t = SyntheticSpec::default().prompt_rows)]
    pub prompt_rows: usize,
    #[arg(long, env = "EMMPD_SEED", default_value_t = SyntheticSpec::default().seed)]
    pub seed: u64,
    /// Overwrite a non-empty output directory
    #[arg(long)]
    pub force: bool,
}

impl SynthArgs {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_patients: self.patients,
            slides_per_patient: (self.slides_min, self.slides_max),
            patches_per_slide: (self.patches_min, self.patches_max),
            d: self.d,
            classes: self.classes,
            dup_ratio: self.dup_ratio,
            signal: self.signal,
            noise: self.noise,
            prevalence: self.prevalence,
            cluster: self.cluster,
            task_mode: self.task_mode,
            prompt_rows: self.prompt_rows,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Window side
    #[arg(long, default_value_t = 8)]
    pub w: i32,
    /// Directory for compress.txt / compress.json
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Training settings. Unset flags fall back to the config file, then to
/// built-in defaults.
#[derive(Debug, Default, Args)]
pub struct TrainFlags {
    /// TOML file with any TrainConfig fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Peak learning rate, decayed linearly to 0 [default: 0.0001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epoch budget [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs without validation improvement before stopping [default: 10]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Focal positive weight [default: 0.25]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Focal focusing exponent [default: 2]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Compression window side [default: 8]
    #[arg(long)]
    pub w: Option<i32>,
    /// Patches kept per bag [default: 64]
    #[arg(long = "top-k")]
    pub top_k: Option<usize>,
    /// Graph neighbours per patch [default: 8]
    #[arg(long)]
    pub k_nn: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    pub heads: Option<usize>,
    /// Learnable prompt rows [default: manifest value]
    #[arg(long)]
    pub t: Option<usize>,
    /// Selection mode: tsps, attention-only, compress-only, random, pos-k, 1dcom [default: tsps]
    #[arg(long)]
    pub selection: Option<SelectionMode>,
    /// Use the graph branch [default: true]
    #[arg(long)]
    pub use_gcn: Option<bool>,
    /// Use the text branch [default: true]
    #[arg(long)]
    pub use_text: Option<bool>,
    /// Fusion: ours, cat, add [default: ours]
    #[arg(long)]
    pub fusion: Option<FusionKind>,
    /// Graph placement: after, before [default: after]
    #[arg(long)]
    pub graph_placement: Option<GraphPlacement>,
    /// Selector pretraining epochs [default: 30]
    #[arg(long)]
    pub selector_epochs: Option<usize>,
    /// Selector learning rate [default: 0.001]
    #[arg(long)]
    pub selector_lr: Option<f64>,
    /// Selector hidden width [default: 64]
    #[arg(long)]
    pub selector_hidden: Option<usize>,
    /// Run seed [default: 7]
    #[arg(long, env = "EMMPD_SEED")]
    pub seed: Option<u64>,
}

impl TrainFlags {
    /// Overlays set flags on `base`.
    pub fn apply(&self, mut c: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { c.$field = v; })*
            };
        }
        set!(
            lr, epochs, patience, alpha, gamma, w, top_k, k_nn, heads, selection, use_gcn, use_text, fusion,
            graph_placement, selector_epochs, selector_lr, selector_hidden, seed
        );
        if self.t.is_some() {
            c.t = self.t;
        }
        c
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory (created if absent)
    #[arg(long)]
    pub out: PathBuf,
    /// Permute training labels across bags (negative control)
    #[arg(long)]
    pub shuffle_labels: bool,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// train, val or test
    #[arg(long, default_value = "test")]
    pub split: emmpd::data::Split,
    /// Write metrics.json / metrics.txt here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// modules, sampling, window, gcn_placement, fusion, k_sweep, alpha_sweep, gamma_sweep
    #[arg(long)]
    pub mode: AblationMode,
    /// Comma-separated values for the numeric sweeps
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Write ablation_<mode>.json / .txt here
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Break one backward rule (fixture for testing the checker)
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}
