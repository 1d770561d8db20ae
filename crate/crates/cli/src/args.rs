use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "pdfuse", version, about = "Pseudo-depth fusion for semantic segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Dtype::F32)]
    pub dtype: Dtype,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with simulated pseudo depth.
    GenData(GenDataArgs),
    /// Aggregate pseudo-depth maps with the attention module.
    Aggregate(AggregateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write the noise schedule table.
    Schedule(ScheduleArgs),
    /// Train a segmentation model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Train one model per grid cell and seed and tabulate the scores.
    Ablate(AblateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Aggregate(_) => "aggregate",
            Command::Gradcheck(_) => "gradcheck",
            Command::Schedule(_) => "schedule",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 40)]
    pub train: usize,
    #[arg(long, default_value_t = 20)]
    pub test: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    /// Perturbation profiles, one pseudo-depth map each.
    #[arg(long, value_delimiter = ',', default_value = "sharp,smooth,quantized,sensor")]
    pub profiles: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Single-channel PFM maps of equal size.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// Checkpoint holding trained attention parameters; zero-initialised when absent.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub lambda_c: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda_s: f64,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "aggregated.pfm")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
    /// Only cases whose name contains this string.
    #[arg(long)]
    pub filter: Option<String>,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.00085)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.012)]
    pub beta_end: f64,
    #[arg(long, default_value = "scaled-linear")]
    pub kind: String,
}

/// Model and optimiser flags, one per training-config field.
#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    #[arg(long, default_value = "16,32")]
    pub stem_widths: String,
    #[arg(long, default_value = "16,32")]
    pub encoder_widths: String,
    #[arg(long, default_value_t = 16)]
    pub unet_width: usize,
    /// rgb_only, structured, gaussian or manual:W_RGB:W_PD.
    #[arg(long, default_value = "structured")]
    pub fusion: String,
    /// none, single:TAG, addition or pdam.
    #[arg(long, default_value = "pdam")]
    pub pd_source: String,
    #[arg(long, default_value_t = 0)]
    pub t: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lambda_c: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda_s: f64,
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr_backbone: f64,
    #[arg(long, default_value_t = 2e-3)]
    pub lr_rest: f64,
    #[arg(long, default_value_t = 0.05)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1500)]
    pub lr_decay_step: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr_decay_factor: f64,
    #[arg(long, default_value_t = 500)]
    pub eval_interval: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Pseudo-depth maps to keep, by profile name; all when absent.
    #[arg(long, value_delimiter = ',')]
    pub tags: Vec<String>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub tags: Vec<String>,
    /// Average over scales 0.75, 1, 1.25 and horizontal flips.
    #[arg(long)]
    pub multi_scale: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// weights, timestep or depth-source.
    #[arg(long)]
    pub grid: String,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub data: PathBuf,
    /// Only cells with these names.
    #[arg(long, value_delimiter = ',')]
    pub cells: Vec<String>,
    #[command(flatten)]
    pub model: ModelArgs,
}
