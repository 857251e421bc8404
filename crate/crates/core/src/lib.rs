//! Uncertainty-aware regression for MOS-style quality prediction.
//!
//! A two-head network predicts a quality score and the log of its aleatoric
//! variance and is trained with the Gaussian negative log-likelihood
//! ([`trainer`]). The variance is recalibrated post hoc by a single closed-form
//! scale ([`calibrate`]). At test time, Monte Carlo dropout ([`mcdropout`])
//! yields two epistemic uncertainties: the spread of predicted scores and the
//! spread of predicted log-variances. [`metrics`] scores predictions and
//! uncertainties, including selective prediction and OOD detection, and
//! [`datagen`] produces synthetic data with known noise for all of it.

pub mod calibrate;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod loss;
pub mod mcdropout;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod trainer;

pub use calibrate::{apply_scale, fit_scale, CalibrationScale};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use datagen::{
    add_feature_noise, gen_ood_shift, gen_synthetic, Dataset, DomainTag, GenConfig, NoiseModel,
    Sample,
};
pub use error::{Error, Result};
pub use evaluate::{PointKind, UncertaintyKind};
pub use loss::{mse_loss, nll_loss, LossKind, LossValue};
pub use mcdropout::{mc_forward, variance_of, MCConfig, MCResult};
pub use metrics::{EvalRecord, MetricsReport};
pub use net::{
    backward, forward, init_params, predict, Activation, ArchConfig, ForwardCache, ForwardMode,
    Gradients, HeteroPrediction, ModelParams,
};
pub use trainer::{train, OptimizerKind, TrainConfig, TrainHistory};
