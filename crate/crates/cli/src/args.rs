//! Command-line flags and their JSON config-file counterparts.
//!
//! Every flag struct is also deserializable from a `--config` JSON object
//! using the same field names (snake_case). Values are layered as
//! built-in defaults, then `--preset`, then the config file, then flags.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mosuq::{Activation, LossKind, OptimizerKind, PointKind, UncertaintyKind};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Parser)]
#[command(
    name = "mosuq",
    version,
    about = "Uncertainty-aware quality-score regression"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset CSV (optionally shifted, noised, or split).
    GenData(GenDataArgs),
    /// Train the two-head network and write a checkpoint plus loss history.
    Train(TrainArgs),
    /// Fit the variance scale on a calibration set and store it in the checkpoint.
    Calibrate(CalibrateArgs),
    /// Score a dataset and write metrics, curves and per-sample MC output.
    Evaluate(EvaluateArgs),
    /// Separate in-domain from OOD samples by one uncertainty and report AUC.
    OodDetect(OodDetectArgs),
}

/// Parses a value through its serde representation, so flags and config
/// files accept the same spellings.
fn serde_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataPreset {
    Homoscedastic,
    Heteroscedastic,
    RaterPanel,
}

/// Hyperparameter presets for train, evaluate and ood-detect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunPreset {
    /// Dropout 0.5, 25 MC passes, 10 UCE bins, batch 8, learning rate 3e-4.
    Paper,
}

pub const PAPER_DROPOUT: f64 = 0.5;
pub const PAPER_MC_PASSES: usize = 25;
pub const PAPER_BINS: usize = 10;
pub const PAPER_BATCH: usize = 8;
pub const PAPER_LR: f64 = 3e-4;

/// A flag struct that can be merged with the contents of a `--config` file.
pub trait Layered: DeserializeOwned + Sized {
    fn config_path(&self) -> Option<&Path>;

    /// Field-wise `self.or(base)`.
    fn overlay(self, base: Self) -> Self;

    /// Reads the `--config` file (if any) and puts the command-line values on top.
    fn with_config_file(self) -> Result<Self, UsageError> {
        let Some(path) = self.config_path().map(Path::to_path_buf) else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let file: Self = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        Ok(self.overlay(file))
    }
}

macro_rules! overlay {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl Layered for $ty {
            fn config_path(&self) -> Option<&Path> {
                self.config.as_deref()
            }

            fn overlay(self, base: Self) -> Self {
                Self {
                    config: self.config,
                    $($field: self.$field.or(base.$field),)*
                }
            }
        }
    };
}

pub fn require<T>(value: Option<T>, flag: &str) -> Result<T, UsageError> {
    value.ok_or_else(|| UsageError(format!("missing required option --{flag}")))
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataArgs {
    /// JSON file with any of these options; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Label-noise model.
    #[arg(long, value_enum)]
    pub preset: Option<DataPreset>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_systems: Option<usize>,
    #[arg(long)]
    pub samples_per_system: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Noise standard deviation for the homoscedastic preset.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Panel size for the rater-panel preset.
    #[arg(long)]
    pub raters: Option<usize>,
    /// Per-rater standard deviation for the rater-panel preset.
    #[arg(long)]
    pub rater_sd: Option<f64>,
    /// Independent draw from the same world (same centers and score function).
    #[arg(long)]
    pub draw_stream: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub clip_labels: Option<bool>,
    /// Shift every feature vector by this many standard deviations along a
    /// fixed direction and tag the samples as OOD.
    #[arg(long)]
    pub ood_shift: Option<f64>,
    /// Gaussian feature noise, relative to the global feature standard deviation.
    #[arg(long, conflicts_with = "waveform_noise")]
    pub noise_level: Option<f64>,
    /// Waveform-style noise level, mapped onto a relative feature-noise level.
    #[arg(long)]
    pub waveform_noise: Option<f64>,
    #[arg(long)]
    pub noise_seed: Option<u64>,
    /// Train/validation/test fractions, e.g. 0.7,0.15,0.15.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<f64>>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Output CSV; with --split, `<stem>_{train,val,test}.csv` next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

overlay!(GenDataArgs {
    preset,
    seed,
    num_systems,
    samples_per_system,
    feature_dim,
    sigma,
    raters,
    rater_sd,
    draw_stream,
    clip_labels,
    ood_shift,
    noise_level,
    waveform_noise,
    noise_seed,
    split,
    split_seed,
    out,
});

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<RunPreset>,
    /// Training dataset CSV.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation dataset CSV; its loss is recorded per epoch.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long, value_parser = serde_value::<LossKind>)]
    pub loss: Option<LossKind>,
    #[arg(long, value_parser = serde_value::<OptimizerKind>)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden widths of the shared trunk, e.g. 32 or 64,32.
    #[arg(long, value_delimiter = ',')]
    pub trunk_dims: Option<Vec<usize>>,
    #[arg(long)]
    pub head_hidden_dim: Option<usize>,
    #[arg(long)]
    pub dropout_p: Option<f64>,
    #[arg(long, value_parser = serde_value::<Activation>)]
    pub activation: Option<Activation>,
}

overlay!(TrainArgs {
    preset,
    train,
    val,
    out_dir,
    epochs,
    batch_size,
    learning_rate,
    loss,
    optimizer,
    seed,
    trunk_dims,
    head_hidden_dim,
    dropout_p,
    activation,
});

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Calibration dataset CSV (normally the validation split).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output checkpoint; defaults to updating --checkpoint in place.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

overlay!(CalibrateArgs {
    checkpoint,
    data,
    out
});

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<RunPreset>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluation dataset CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Metrics report path; defaults to `<out-dir>/report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Run MC dropout (implied by epistemic uncertainties and `--point mc-mean`).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub mc: Option<bool>,
    /// Number of stochastic passes.
    #[arg(long)]
    pub mc_passes: Option<usize>,
    /// Dropout probability during MC sampling; defaults to the checkpoint's.
    #[arg(long)]
    pub mc_dropout_p: Option<f64>,
    #[arg(long)]
    pub mc_seed: Option<u64>,
    /// Number of UCE bins.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Number of equal-count bins of the error-uncertainty curve.
    #[arg(long)]
    pub curve_bins: Option<usize>,
    /// Number of quantile thresholds in the selective-prediction sweep.
    #[arg(long)]
    pub thresholds: Option<usize>,
    #[arg(long, value_parser = serde_value::<UncertaintyKind>)]
    pub uncertainty: Option<UncertaintyKind>,
    #[arg(long, value_parser = serde_value::<PointKind>)]
    pub point: Option<PointKind>,
}

overlay!(EvaluateArgs {
    preset,
    checkpoint,
    data,
    out_dir,
    report,
    mc,
    mc_passes,
    mc_dropout_p,
    mc_seed,
    bins,
    curve_bins,
    thresholds,
    uncertainty,
    point,
});

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodDetectArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<RunPreset>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// In-domain dataset CSV (label 0).
    #[arg(long)]
    pub in_domain: Option<PathBuf>,
    /// Out-of-domain dataset CSV (label 1).
    #[arg(long)]
    pub ood: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub mc_passes: Option<usize>,
    #[arg(long)]
    pub mc_dropout_p: Option<f64>,
    #[arg(long)]
    pub mc_seed: Option<u64>,
    /// Uncertainty used as the OOD score (default epi-dist).
    #[arg(long, value_parser = serde_value::<UncertaintyKind>)]
    pub uncertainty: Option<UncertaintyKind>,
}

overlay!(OodDetectArgs {
    preset,
    checkpoint,
    in_domain,
    out_dir,
    ood,
    mc_passes,
    mc_dropout_p,
    mc_seed,
    uncertainty,
});
