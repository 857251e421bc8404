//! Test-time Monte Carlo dropout.
//!
//! `T` stochastic passes with dropout active in both heads give samples
//! `(y_t, s_t)`. Their population variances (divisor `T`) are the epistemic
//! prediction uncertainty (over `y_t`) and the epistemic distributional
//! uncertainty (over `s_t`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationScale;
use crate::error::{Error, Result};
use crate::net::{self, validate_dropout, ForwardMode, ModelParams};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MCConfig {
    pub passes: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for MCConfig {
    fn default() -> Self {
        Self {
            passes: 25,
            dropout_p: 0.5,
            seed: 0,
        }
    }
}

impl MCConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 {
            return Err(Error::Config("MC dropout needs at least one pass".into()));
        }
        validate_dropout(self.dropout_p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCResult {
    pub y_samples: Vec<f64>,
    pub s_samples: Vec<f64>,
    pub y_mean: f64,
    pub s_mean: f64,
    /// Population variance of `y_samples`.
    pub epi_pred_var: f64,
    /// Population variance of `s_samples`.
    pub epi_dist_var: f64,
    /// `r^2 * mean(exp(s_t))`, with `r = 1` when uncalibrated.
    pub aleatoric_var: f64,
}

impl MCResult {
    pub fn from_samples(
        y_samples: Vec<f64>,
        s_samples: Vec<f64>,
        scale: Option<&CalibrationScale>,
    ) -> Result<Self> {
        if y_samples.len() != s_samples.len() {
            return Err(Error::Shape("y and s sample counts differ".into()));
        }
        let epi_pred_var = variance_of(&y_samples)?;
        let epi_dist_var = variance_of(&s_samples)?;
        let n = y_samples.len() as f64;
        let r2 = scale.map_or(1.0, |s| s.r * s.r);
        let aleatoric_var = r2 * s_samples.iter().map(|s| s.exp()).sum::<f64>() / n;
        Ok(Self {
            y_mean: mean(&y_samples),
            s_mean: mean(&s_samples),
            y_samples,
            s_samples,
            epi_pred_var,
            epi_dist_var,
            aleatoric_var,
        })
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divisor `n`), computed in two passes on values
/// shifted by the first sample. Identical samples give exactly zero.
pub fn variance_of(samples: &[f64]) -> Result<f64> {
    let Some(&pivot) = samples.first() else {
        return Err(Error::Input("variance of an empty sample".into()));
    };
    let n = samples.len() as f64;
    let m = samples.iter().map(|x| x - pivot).sum::<f64>() / n;
    Ok(samples
        .iter()
        .map(|x| {
            let d = x - pivot - m;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Runs `cfg.passes` dropout passes; pass `t` draws its masks from the
/// substream `(cfg.seed, t)`.
pub fn mc_forward(
    params: &ModelParams,
    x: &[f64],
    cfg: &MCConfig,
    scale: Option<&CalibrationScale>,
) -> Result<MCResult> {
    cfg.validate()?;
    let mode = ForwardMode::Dropout { p: cfg.dropout_p };
    let mut ys = Vec::with_capacity(cfg.passes);
    let mut ss = Vec::with_capacity(cfg.passes);
    for t in 0..cfg.passes {
        let (pred, _) = net::forward(params, x, mode, &mut rng::stream(cfg.seed, t as u64))?;
        ys.push(pred.y_hat);
        ss.push(pred.s);
    }
    MCResult::from_samples(ys, ss, scale)
}

/// [`mc_forward`] over many inputs in parallel. Input `i` uses the seed
/// `derive_seed(cfg.seed, i)`, so results depend only on position.
pub fn mc_forward_batch<'a, I>(
    params: &ModelParams,
    inputs: I,
    cfg: &MCConfig,
    scale: Option<&CalibrationScale>,
) -> Result<Vec<MCResult>>
where
    I: IntoParallelIterator<Item = &'a [f64]>,
    I::Iter: IndexedParallelIterator,
{
    cfg.validate()?;
    inputs
        .into_par_iter()
        .enumerate()
        .map(|(i, x)| {
            let sample_cfg = MCConfig {
                seed: rng::derive_seed(cfg.seed, i as u64),
                ..*cfg
            };
            mc_forward(params, x, &sample_cfg, scale)
        })
        .collect()
}
