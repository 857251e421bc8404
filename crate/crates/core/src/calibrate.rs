//! Closed-form scaling of aleatoric uncertainty.
//!
//! With the network frozen, the Gaussian NLL of `N(y_hat, (r sigma)^2)` over a
//! calibration set is minimized in closed form by
//! `r^2 = mean((y - y_hat)^2 / sigma^2)`. No iterative optimization is needed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::HeteroPrediction;

/// Smallest admissible scale; used when every residual is zero.
pub const MIN_SCALE: f64 = 1e-6;
const DEGENERATE_SUM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationScale {
    pub r: f64,
    pub num_samples_used: usize,
    /// Mean normalized squared residual; equals `r^2` unless the fit was degenerate.
    pub mean_normalized_residual_sq: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl CalibrationScale {
    pub fn identity() -> Self {
        Self::from_r(1.0)
    }

    /// Wraps a stored scale, e.g. `calibration_r` from a checkpoint.
    pub fn from_r(r: f64) -> Self {
        Self {
            r,
            num_samples_used: 0,
            mean_normalized_residual_sq: r * r,
            warning: None,
        }
    }
}

pub fn fit_scale(preds: &[HeteroPrediction], labels: &[f64]) -> Result<CalibrationScale> {
    if preds.is_empty() {
        return Err(Error::Input("calibration set is empty".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut sum = 0.0;
    for (p, &y) in preds.iter().zip(labels) {
        if p.sigma2.is_nan() || p.sigma2 <= 0.0 {
            return Err(Error::Invariant(format!(
                "predicted variance {} is not positive",
                p.sigma2
            )));
        }
        let e = y - p.y_hat;
        sum += e * e / p.sigma2;
    }
    let mean = sum / preds.len() as f64;
    if sum < DEGENERATE_SUM {
        let msg = format!(
            "degenerate calibration fit: normalized residual sum {sum:e}; r floored at {MIN_SCALE}"
        );
        log::warn!("{msg}");
        return Ok(CalibrationScale {
            r: MIN_SCALE,
            num_samples_used: preds.len(),
            mean_normalized_residual_sq: mean,
            warning: Some(msg),
        });
    }
    Ok(CalibrationScale {
        r: mean.sqrt(),
        num_samples_used: preds.len(),
        mean_normalized_residual_sq: mean,
        warning: None,
    })
}

/// Scales the predicted standard deviation by `r`; the score is untouched.
pub fn apply_scale(pred: &HeteroPrediction, scale: &CalibrationScale) -> HeteroPrediction {
    let r = scale.r;
    HeteroPrediction {
        y_hat: pred.y_hat,
        s: pred.s + 2.0 * r.ln(),
        sigma2: r * r * pred.sigma2,
    }
}
