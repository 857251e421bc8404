//! Mini-batch training of the two-head network.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::loss::{loss, LossKind};
use crate::net::{self, ArchConfig, ForwardMode, Gradients, Layers, ModelParams};
use crate::rng;

pub use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            learning_rate: 3e-4,
            loss: LossKind::Nll,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Option<Vec<f64>>,
}

impl TrainHistory {
    /// CSV with header `epoch,train_loss,val_loss`; `val_loss` is empty when
    /// no validation split was given. Epochs are 1-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (i, tl) in self.train_loss.iter().enumerate() {
            let vl = self
                .val_loss
                .as_ref()
                .map(|v| v[i].to_string())
                .unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", i + 1, tl, vl);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        step: i32,
        m: Box<Layers>,
        v: Box<Layers>,
    },
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, arch: &ArchConfig) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                step: 0,
                m: Box::new(Layers::zeros(arch)),
                v: Box::new(Layers::zeros(arch)),
            },
        }
    }

    fn step(&mut self, params: &mut Layers, grads: &Gradients) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    p.iter_mut().zip(g).for_each(|(p, g)| *p -= *lr * g);
                }
            }
            Optimizer::Adam { lr, step, m, v } => {
                *step += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*step);
                let bc2 = 1.0 - ADAM_BETA2.powi(*step);
                let tensors = params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(m.tensors_mut().into_iter().zip(v.tensors_mut()));
                for ((p, g), (m, v)) in tensors {
                    for i in 0..p.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= *lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

fn check_dataset(ds: &Dataset, arch: &ArchConfig, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Input(format!("{what} dataset is empty")));
    }
    if let Some(s) = ds
        .samples
        .iter()
        .find(|s| s.features.len() != arch.input_dim)
    {
        return Err(Error::Shape(format!(
            "{what} sample {} has {} features, architecture expects {}",
            s.id,
            s.features.len(),
            arch.input_dim
        )));
    }
    Ok(())
}

/// Mean loss over `ds` with deterministic forward passes.
pub fn mean_loss(params: &ModelParams, ds: &Dataset, kind: LossKind) -> Result<f64> {
    let mut total = 0.0;
    for s in &ds.samples {
        let pred = net::predict(params, &s.features)?;
        total += loss(kind, &pred, s.y).value;
    }
    Ok(total / ds.len() as f64)
}

/// Trains from a seed-derived initialization. Each epoch visits the samples
/// in a fresh seeded order; dropout is active in both heads. The per-batch
/// objective is the mean loss over the batch.
pub fn train(
    dataset: &Dataset,
    validation: Option<&Dataset>,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    arch.validate()?;
    check_dataset(dataset, arch, "training")?;
    if let Some(val) = validation {
        check_dataset(val, arch, "validation")?;
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "epochs and batch_size must be positive".into(),
        ));
    }
    if cfg.batch_size > dataset.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds dataset size {}",
            cfg.batch_size,
            dataset.len()
        )));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::Config("learning_rate must be positive".into()));
    }

    let mut params = net::init_params(arch, cfg.seed)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, arch);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = rng::stream(cfg.seed, 1);
    let mut dropout_rng = rng::stream(cfg.seed, 2);
    let mode = ForwardMode::Dropout { p: arch.dropout_p };
    let mut grads = Layers::zeros(arch);
    let mut history = TrainHistory {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_loss: validation.map(|_| Vec::with_capacity(cfg.epochs)),
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.fill(0.0);
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let sample = &dataset.samples[i];
                let (pred, cache) =
                    net::forward(&params, &sample.features, mode, &mut dropout_rng)?;
                let l = loss(cfg.loss, &pred, sample.y);
                epoch_loss += l.value;
                net::backward_into(
                    &cache,
                    &params,
                    weight * l.d_y_hat,
                    weight * l.d_s,
                    &mut grads,
                )?;
            }
            optimizer.step(&mut params.layers, &grads);
        }
        let epoch_loss = epoch_loss / dataset.len() as f64;
        if !epoch_loss.is_finite() || !params.layers.all_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.train_loss.push(epoch_loss);
        if let (Some(val), Some(hist)) = (validation, history.val_loss.as_mut()) {
            let vl = mean_loss(&params, val, cfg.loss)?;
            if !vl.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            hist.push(vl);
        }
        log::debug!("epoch {epoch}: train loss {epoch_loss:.6}");
    }
    Ok((params, history))
}
