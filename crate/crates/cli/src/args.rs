use std::path::PathBuf;

use attnseg::model::Preset;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "attnseg", version, about = "Attention-augmented lesion segmentation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one configuration and write checkpoints plus history.csv.
    Train(TrainCmd),
    /// Score predictions (from a checkpoint or a mask directory) against ground truth.
    Eval(EvalCmd),
    /// Train the four stacked ablation configurations and tabulate them.
    Ablate(TrainCmd),
    /// Friedman test and Nemenyi post hoc comparison over a score CSV.
    Stats(StatsCmd),
    /// Colour-coded prediction overlays.
    Overlay(EvalCmd),
    /// Write a synthetic dataset in the BUSI layout.
    Synth(SynthCmd),
    /// Parameter count per component.
    Params(ParamsCmd),
    /// Finite-difference gradient report per block.
    Gradcheck(GradcheckCmd),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// JSON run configuration; flags given on the command line override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub no_tam: bool,
    #[arg(long)]
    pub no_sfeb: bool,
    #[arg(long)]
    pub no_convblock: bool,
    /// Probability cut-off for the binary mask.
    #[arg(long, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Dataset root (BUSI class folders, or `original/` + `GT/`).
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Generate this many synthetic samples in memory instead of reading `--data`.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Samples held out as a fixed test split before the train/validation split.
    #[arg(long)]
    pub test_size: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Ground-truth dataset root.
    #[arg(long)]
    pub data: PathBuf,
    /// Binary masks as `<image id>.png`, mirroring the dataset's class folders.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub pred: Option<PathBuf>,
    /// Weights from `train`; the model comes from `--model-config` or the model flags.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `model_config.json` written by `train`.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Evaluation resolution; defaults to the model input size.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub batch: usize,
    /// Also write predicted masks as PNG (checkpoint mode).
    #[arg(long)]
    pub save_masks: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StatsCmd {
    /// CSV with one column per method and one row per image.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthCmd {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ParamsCmd {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Also list every ablation configuration.
    #[arg(long)]
    pub ablation: bool,
    /// Write params.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckCmd {
    #[arg(long, default_value = "tiny")]
    pub preset: Preset,
    /// Number of consecutive seeds, starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restrict to one block.
    #[arg(long)]
    pub block: Option<String>,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Write gradcheck.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
