//! Per-sample training losses on `(y_hat, s)` with their analytic gradients.

use serde::{Deserialize, Serialize};

use crate::net::HeteroPrediction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Nll,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub d_y_hat: f64,
    pub d_s: f64,
}

/// Gaussian negative log-likelihood without the `ln(2*pi)/2` constant:
/// `s/2 + (y - y_hat)^2 / (2 exp(s))`.
pub fn nll_loss(pred: &HeteroPrediction, y: f64) -> LossValue {
    let residual = y - pred.y_hat;
    let inv_var = (-pred.s).exp();
    let half_sq = 0.5 * residual * residual * inv_var;
    LossValue {
        value: 0.5 * pred.s + half_sq,
        d_y_hat: -residual * inv_var,
        d_s: 0.5 - half_sq,
    }
}

/// Squared error on the score head only; the log-variance head gets no signal.
pub fn mse_loss(pred: &HeteroPrediction, y: f64) -> LossValue {
    let residual = y - pred.y_hat;
    LossValue {
        value: residual * residual,
        d_y_hat: -2.0 * residual,
        d_s: 0.0,
    }
}

pub fn loss(kind: LossKind, pred: &HeteroPrediction, y: f64) -> LossValue {
    match kind {
        LossKind::Nll => nll_loss(pred, y),
        LossKind::Mse => mse_loss(pred, y),
    }
}
