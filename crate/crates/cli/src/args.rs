use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "lidia", version, about = "Lightweight learned image denoising with instance adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Denoise one image with a trained model.
    Denoise(DenoiseArgs),
    /// Train a model from scratch on clean images.
    Train(TrainArgs),
    /// Fine-tune a model on clean images related to the input.
    AdaptExternal(AdaptExternalArgs),
    /// Fine-tune a model on its own output for one noisy image, then denoise it again.
    AdaptInternal(AdaptInternalArgs),
    /// Add seeded noise to clean images, denoise them and report PSNR.
    Eval(EvalArgs),
    /// Run the built-in verification suites.
    Selftest(SelftestArgs),
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Serialize, Deserialize)]
pub struct Common {
    /// JSON file with option values; flags given on the command line take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Worker threads (0 uses every core). Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Seed for every random draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchName {
    /// 7x7 grayscale patches, 64 features.
    Gray,
    /// 5x5x3 color patches, 80 features.
    Color,
    /// 5x5 grayscale patches, 16 features, for quick experiments.
    Tiny,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantName {
    /// Full network.
    Lidia,
    /// Without the second per-scale block and the second fusion block.
    LidiaS,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct DenoiseArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Noisy PGM/PPM image.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Where to write the denoised image.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Clean image; prints the PSNR of the result against it.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Search window side, overriding the one stored in the model.
    #[arg(long)]
    pub window: Option<usize>,
    /// Pixels processed per chunk; bounds memory.
    #[arg(long, default_value_t = 4096)]
    pub chunk: usize,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Clean training images or directories of them.
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Clean validation images or directories, denoised after every epoch.
    #[arg(long, num_args = 1..)]
    pub validation: Vec<PathBuf>,
    /// Where to write the trained model.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// CSV training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Network shape.
    #[arg(long, value_enum, default_value_t = ArchName::Gray)]
    pub arch: ArchName,
    /// Full network or the reduced one.
    #[arg(long, value_enum, default_value_t = VariantName::Lidia)]
    pub variant: VariantName,
    /// One weight net for both scales.
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    pub share_weight_net: bool,
    /// Passes over the training images.
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Crops per step, each from a different image.
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Side of the square training crops.
    #[arg(long, default_value_t = 64)]
    pub crop: usize,
    /// Noise level on the 8-bit scale.
    #[arg(long, default_value_t = 25.0)]
    pub sigma: f64,
    /// Draw the noise level per crop from [sigma-min, sigma-max] instead.
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    pub blind: bool,
    /// Lowest noise level in blind training.
    #[arg(long, default_value_t = 10.0)]
    pub sigma_min: f64,
    /// Highest noise level in blind training.
    #[arg(long, default_value_t = 30.0)]
    pub sigma_max: f64,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-2)]
    pub adam_lr: f64,
    /// SGD learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub sgd_lr: f64,
    /// Fraction of the epochs trained with Adam before switching to SGD.
    #[arg(long, default_value_t = 0.8)]
    pub switch_fraction: f64,
    /// Save a checkpoint every this many epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Directory for checkpoints and the last good model after a failure.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
}

/// Fine-tuning options shared by both adaptation modes.
#[derive(Args, Debug, Serialize, Deserialize)]
pub struct AdaptOptions {
    /// Noise level of the input on the 8-bit scale.
    #[arg(long, default_value_t = 25.0)]
    pub sigma: f64,
    /// Fine-tuning epochs; 0 leaves the model unchanged.
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Side of the square training crops.
    #[arg(long, default_value_t = 64)]
    pub crop: usize,
    /// Crops per step.
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Keep batch-norm statistics fixed at their trained values.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub freeze_batch_norm: bool,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct AdaptExternalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub adapt: AdaptOptions,
    /// Model to start from.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Clean images resembling the ones to denoise, or directories of them.
    #[arg(long, num_args = 1..)]
    pub related: Vec<PathBuf>,
    /// Where to write the adapted model.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// CSV training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct AdaptInternalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub adapt: AdaptOptions,
    /// Model to start from.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Noisy PGM/PPM image.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Where to write the image denoised by the adapted model.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Also write the adapted model.
    #[arg(long)]
    pub save_model: Option<PathBuf>,
    /// CSV training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Clean image; prints PSNR before and after adaptation.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Random crops per epoch.
    #[arg(long, default_value_t = 16)]
    pub crops_per_epoch: usize,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Clean images or directories of them.
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Noise level on the 8-bit scale.
    #[arg(long, default_value_t = 25.0)]
    pub sigma: f64,
    /// CSV report; printed to stdout as well.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Add a wall-clock runtime column (not reproducible).
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    pub timing: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultName {
    SlBackward,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct SelftestArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Inject a known defect to confirm the suites catch it.
    #[arg(long, value_enum)]
    pub inject_fault: Option<FaultName>,
}
