use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use weightscope::merge::{NonFloatPolicy, OutputDType};
use weightscope::moments::{Center, FilterSpec};
use weightscope::shape_classify::DEFAULT_ALPHA;

use crate::report::Format;

#[derive(Debug, Parser)]
#[command(name = "weightscope", version, about = "Weight-distribution forensics for safetensors checkpoints")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "WEIGHTSCOPE_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-tensor mean, σ, skewness, kurtosis and retain ratio.
    Inspect(InspectArgs),
    /// Shape regime of every tensor.
    Classify(ClassifyArgs),
    /// Synthetic sparse weights under a sweep of noise levels.
    Synth(SynthArgs),
    /// Merge fine-tuned checkpoints that share a base.
    Merge(MergeArgs),
    /// Compare per-tensor σ of two task vectors against one base.
    CompareDelta(CompareDeltaArgs),
    /// Rank correlation between layer depth and task-vector σ.
    DepthTrend(DepthTrendArgs),
    /// Train a noise scale on a toy regression task.
    ToyAdapt(ToyAdaptArgs),
    /// Histogram of one or more tensors.
    Hist(HistArgs),
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json", alias = "report")]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CenterArg {
    Mean,
    Zero,
}

impl From<CenterArg> for Center {
    fn from(c: CenterArg) -> Self {
        match c {
            CenterArg::Mean => Center::SampleMean,
            CenterArg::Zero => Center::Zero,
        }
    }
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Keep values within center ± k·σ.
    #[arg(long, default_value_t = 3.0)]
    pub sigma_k: f64,
    /// Use every finite value.
    #[arg(long)]
    pub no_sigma_filter: bool,
    /// Also drop values with |w| below this.
    #[arg(long)]
    pub min_magnitude: Option<f64>,
    #[arg(long, value_enum, default_value = "mean")]
    pub center: CenterArg,
}

impl FilterArgs {
    pub fn spec(&self) -> Option<FilterSpec> {
        let sigma_k = (!self.no_sigma_filter).then_some(self.sigma_k);
        (sigma_k.is_some() || self.min_magnitude.is_some()).then(|| FilterSpec {
            sigma_k,
            magnitude_min: self.min_magnitude,
            center: self.center.into(),
        })
    }
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub file: PathBuf,
    /// Only tensors whose name matches this regex.
    #[arg(long)]
    pub pattern: Option<String>,
    #[command(flatten)]
    pub filter: FilterArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    pub file: PathBuf,
    /// JSON thresholds file; built-in defaults when absent.
    #[arg(long, env = "WEIGHTSCOPE_THRESHOLDS")]
    pub thresholds: Option<PathBuf>,
    #[arg(long)]
    pub pattern: Option<String>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON file with the generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub total_points: Option<usize>,
    #[arg(long)]
    pub nonzero_points: Option<usize>,
    /// Comma-separated noise σ values.
    #[arg(long, value_delimiter = ',')]
    pub noise_levels: Option<Vec<f64>>,
    /// Classify with these thresholds instead of calibrating on the sweep.
    #[arg(long, env = "WEIGHTSCOPE_THRESHOLDS")]
    pub thresholds: Option<PathBuf>,
    /// Write the thresholds used to this JSON file.
    #[arg(long)]
    pub save_thresholds: Option<PathBuf>,
    /// Write one histogram CSV per level into this directory.
    #[arg(long)]
    pub hist_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub bins: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Also write the signal and every noisy level to a safetensors file.
    #[arg(long)]
    pub write_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Outlier,
    Average,
    Sum,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NonFloatArg {
    Copy,
    Fail,
}

impl From<NonFloatArg> for NonFloatPolicy {
    fn from(p: NonFloatArg) -> Self {
        match p {
            NonFloatArg::Copy => NonFloatPolicy::CopyBase,
            NonFloatArg::Fail => NonFloatPolicy::Fail,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OutputDTypeArg {
    Base,
    F32,
}

impl From<OutputDTypeArg> for OutputDType {
    fn from(d: OutputDTypeArg) -> Self {
        match d {
            OutputDTypeArg::Base => OutputDType::Base,
            OutputDTypeArg::F32 => OutputDType::F32,
        }
    }
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    pub t: f64,
    #[arg(long, value_enum, default_value = "outlier")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "zero")]
    pub center: CenterArg,
    /// What to do with integer and bool tensors.
    #[arg(long, value_enum, default_value = "copy")]
    pub non_float: NonFloatArg,
    #[arg(long, value_enum, default_value = "base")]
    pub output_dtype: OutputDTypeArg,
    /// Merged checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct CompareDeltaArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub pattern: Option<String>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct DepthTrendArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub ft: PathBuf,
    /// First capture group is the layer index.
    #[arg(long, default_value = r"layers\.(\d+)\.")]
    pub layer_regex: String,
    #[arg(long)]
    pub pattern: Option<String>,
    /// Leave out the first and last layer.
    #[arg(long)]
    pub exclude_ends: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ToyMode {
    Scalar,
    #[value(name = "scalar+lora")]
    ScalarLora,
}

#[derive(Debug, Args)]
pub struct ToyAdaptArgs {
    #[arg(long, value_enum, default_value = "scalar")]
    pub mode: ToyMode,
    #[arg(long, default_value_t = 0.3)]
    pub sigma_true: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the noise matrix; defaults to seed + 1.
    #[arg(long)]
    pub delta_seed: Option<u64>,
    #[arg(long, num_args = 2, value_names = ["IN", "OUT"], default_values_t = [16, 12])]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
    /// Defaults to 4·IN.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct HistArgs {
    pub file: PathBuf,
    /// Tensor to include; repeatable. Default: every float tensor.
    #[arg(long)]
    pub tensor: Vec<String>,
    #[arg(long)]
    pub pattern: Option<String>,
    #[arg(long, default_value_t = 200)]
    pub bins: usize,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    pub range: Option<Vec<f64>>,
    /// Print an ASCII rendering to stderr.
    #[arg(long)]
    pub ascii: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}
