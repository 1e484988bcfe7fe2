//! Command-line driver: synthesis, preprocessing, training, evaluation,
//! prediction and parameter inspection.
//!
//! Exit codes are 0 on success, 1 for input or data errors and 2 for
//! configuration errors (including malformed flags).

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use dtvit_core::datapipe::Split;
use dtvit_core::metrics::EvalScope;

pub mod commands;
pub mod config;
pub mod data;

pub use config::{Preset, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "dtvit", version, about = "Dual-task vision transformer for hemorrhage CT slices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a labelled phantom dataset.
    Synth(SynthArgs),
    /// Mask and window a directory of raw scans into 8-bit images.
    Preprocess(PreprocessArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Classify one image.
    Predict(PredictArgs),
    /// List parameter tensors and the total count.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML file overlaid on the preset defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Slices per class: normal,deep,lobar,subtentorial.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    /// Image side length in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub slices_per_patient: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Directory of DTR1 or 16-bit PGM scans.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Binarization threshold; pixels strictly above it are foreground.
    #[arg(long, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub erosion_radius: Option<usize>,
    #[arg(long)]
    pub edge_columns: Option<usize>,
    /// 4 or 8.
    #[arg(long)]
    pub connectivity: Option<u8>,
    #[arg(long, allow_negative_numbers = true, requires = "window_width")]
    pub window_center: Option<f64>,
    #[arg(long, requires = "window_center")]
    pub window_width: Option<f64>,
    /// Rescale each image by its masked min and max instead of a window.
    #[arg(long, conflicts_with = "window_center")]
    pub no_window: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset directory or index file.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Encoder weights to start from; heads are always freshly initialized.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub no_balance: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    /// `test` when the index carries splits, otherwise every record.
    Auto,
    Train,
    Val,
    Test,
    All,
}

impl SplitChoice {
    pub fn split(self) -> Option<Split> {
        match self {
            SplitChoice::Train => Some(Split::Train),
            SplitChoice::Val => Some(Split::Val),
            SplitChoice::Test => Some(Split::Test),
            SplitChoice::Auto | SplitChoice::All => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// TOML config; defaults to `config.toml` beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitChoice::Auto)]
    pub split: SplitChoice,
    #[arg(long, default_value_t = EvalScope::IchOnly)]
    pub scope: EvalScope,
    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    pub image: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, value_enum, conflicts_with = "checkpoint")]
    pub preset: Option<Preset>,
    /// Replace the dual heads with one linear classifier of this many classes.
    #[arg(long, conflicts_with = "checkpoint")]
    pub reference_head: Option<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// A failed command, classified for the exit code.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Data(_) => 1,
            Failure::Config(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "config: {e:#}"),
            Failure::Data(e) => write!(f, "{e:#}"),
        }
    }
}

pub trait Classify<T> {
    fn config_err(self) -> Result<T, Failure>;
    fn data_err(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config_err(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    fn data_err(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Data(e.into()))
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Inspect(a) => commands::inspect(a),
    }
}
