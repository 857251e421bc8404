//! Two-head feed-forward network.
//!
//! A shared trunk of dense layers feeds two task heads: one predicting the
//! quality score `y_hat`, the other the log-variance `s = ln(sigma^2)`. Each
//! head is `dropout -> dense -> activation -> dense(1)`. Dropout is inverted:
//! kept units are scaled by `1 / (1 - p)` so deterministic inference needs no
//! rescaling. Backpropagation is hand-derived for this fixed topology.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Bounds applied to the log-variance head output.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub trunk_dims: Vec<usize>,
    pub head_hidden_dim: usize,
    pub dropout_p: f64,
    pub activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            trunk_dims: vec![32],
            head_hidden_dim: 16,
            dropout_p: 0.5,
            activation: Activation::Tanh,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if self.trunk_dims.contains(&0) {
            return Err(Error::Config("trunk widths must be >= 1".into()));
        }
        if self.head_hidden_dim == 0 {
            return Err(Error::Config("head_hidden_dim must be >= 1".into()));
        }
        validate_dropout(self.dropout_p)
    }

    /// Width of the representation shared by both heads.
    pub fn trunk_out_dim(&self) -> usize {
        self.trunk_dims.last().copied().unwrap_or(self.input_dim)
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        let mut fan_in = self.input_dim;
        for &w in &self.trunk_dims {
            n += w * fan_in + w;
            fan_in = w;
        }
        n + 2 * (self.head_hidden_dim * fan_in + self.head_hidden_dim + self.head_hidden_dim + 1)
    }
}

pub(crate) fn validate_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Fully connected layer; `weights` is row-major `(rows = outputs, cols = inputs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.weights
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, xi)| acc + w * xi))
            .collect()
    }

    /// Accumulates `delta (x) input` into this layer viewed as a gradient and
    /// returns `W^T delta` computed with `params`.
    fn accumulate(&mut self, params: &Dense, delta: &[f64], input: &[f64]) -> Vec<f64> {
        let mut upstream = vec![0.0; params.cols];
        for (r, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            self.bias[r] += d;
            let g_row = &mut self.weights[r * self.cols..(r + 1) * self.cols];
            let w_row = &params.weights[r * params.cols..(r + 1) * params.cols];
            for c in 0..params.cols {
                g_row[c] += d * input[c];
                upstream[c] += d * w_row[c];
            }
        }
        upstream
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub hidden: Dense,
    pub output: Dense,
}

/// Every learnable tensor of the network. Used both for parameters and for
/// gradients of matching shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Layers {
    pub trunk: Vec<Dense>,
    pub score_head: Head,
    pub logvar_head: Head,
}

impl Layers {
    pub fn zeros(arch: &ArchConfig) -> Self {
        let mut trunk = Vec::with_capacity(arch.trunk_dims.len());
        let mut fan_in = arch.input_dim;
        for &w in &arch.trunk_dims {
            trunk.push(Dense::zeros(w, fan_in));
            fan_in = w;
        }
        let head = || Head {
            hidden: Dense::zeros(arch.head_hidden_dim, fan_in),
            output: Dense::zeros(1, arch.head_hidden_dim),
        };
        Self {
            trunk,
            score_head: head(),
            logvar_head: head(),
        }
    }

    fn dense_layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain([
            &self.score_head.hidden,
            &self.score_head.output,
            &self.logvar_head.hidden,
            &self.logvar_head.output,
        ])
    }

    fn dense_layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk.iter_mut().chain([
            &mut self.score_head.hidden,
            &mut self.score_head.output,
            &mut self.logvar_head.hidden,
            &mut self.logvar_head.output,
        ])
    }

    /// Flat tensors in a fixed order: for each layer (trunk, score head,
    /// log-variance head) its weights then its bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.dense_layers()
            .flat_map(|d| [d.weights.as_slice(), d.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.dense_layers_mut()
            .flat_map(|d| [d.weights.as_mut_slice(), d.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &Layers) -> bool {
        self.trunk.len() == other.trunk.len()
            && self
                .dense_layers()
                .zip(other.dense_layers())
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols)
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradients with respect to every parameter, laid out like [`Layers`].
pub type Gradients = Layers;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub layers: Layers,
    pub rng_seed_used: u64,
}

impl ModelParams {
    /// Checks tensor shapes against `arch` and that all entries are finite.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let expected = Layers::zeros(&self.arch);
        if !self.layers.same_shape(&expected)
            || self
                .layers
                .dense_layers()
                .any(|d| d.weights.len() != d.rows * d.cols || d.bias.len() != d.rows)
        {
            return Err(Error::Shape(
                "parameter shapes do not match architecture".into(),
            ));
        }
        if !self.layers.all_finite() {
            return Err(Error::Invariant("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut layers = Layers::zeros(arch);
    let mut rng = rng::stream(seed, 0);
    for dense in layers.dense_layers_mut() {
        let bound = 1.0 / (dense.cols as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound)
            .map_err(|e| Error::Config(format!("init distribution: {e}")))?;
        dense
            .weights
            .iter_mut()
            .for_each(|w| *w = dist.sample(&mut rng));
    }
    Ok(ModelParams {
        arch: arch.clone(),
        layers,
        rng_seed_used: seed,
    })
}

/// Output distribution of the network: `N(y_hat, exp(s))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeteroPrediction {
    pub y_hat: f64,
    pub s: f64,
    pub sigma2: f64,
}

impl HeteroPrediction {
    pub fn new(y_hat: f64, s: f64) -> Self {
        Self {
            y_hat,
            s,
            sigma2: s.exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    Deterministic,
    /// Inverted dropout at the input of both heads with drop probability `p`.
    Dropout {
        p: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    /// Inverted-dropout mask (entries 0 or `1/(1-p)`); `None` in deterministic mode.
    pub mask: Option<Vec<f64>>,
    pub input: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub hidden_post: Vec<f64>,
    pub output: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub x: Vec<f64>,
    pub trunk_pre: Vec<Vec<f64>>,
    pub trunk_post: Vec<Vec<f64>>,
    pub score: HeadCache,
    pub logvar: HeadCache,
    /// True when the raw log-variance fell outside the clamp range.
    pub logvar_clamped: bool,
}

fn check_input(params: &ModelParams, x: &[f64]) -> Result<()> {
    if x.len() != params.arch.input_dim {
        return Err(Error::Shape(format!(
            "feature vector has length {}, model expects {}",
            x.len(),
            params.arch.input_dim
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite feature value".into()));
    }
    Ok(())
}

fn head_forward(head: &Head, act: Activation, shared: &[f64], mask: Option<Vec<f64>>) -> HeadCache {
    let input: Vec<f64> = match &mask {
        Some(m) => shared.iter().zip(m).map(|(a, k)| a * k).collect(),
        None => shared.to_vec(),
    };
    let hidden_pre = head.hidden.affine(&input);
    let hidden_post: Vec<f64> = hidden_pre.iter().map(|&z| act.apply(z)).collect();
    let output = head.output.affine(&hidden_post)[0];
    HeadCache {
        mask,
        input,
        hidden_pre,
        hidden_post,
        output,
    }
}

fn draw_mask<R: Rng + ?Sized>(rng: &mut R, len: usize, p: f64) -> Vec<f64> {
    let keep_scale = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < p {
                0.0
            } else {
                keep_scale
            }
        })
        .collect()
}

pub fn forward<R: Rng + ?Sized>(
    params: &ModelParams,
    x: &[f64],
    mode: ForwardMode,
    rng: &mut R,
) -> Result<(HeteroPrediction, ForwardCache)> {
    check_input(params, x)?;
    let masks = match mode {
        ForwardMode::Deterministic => None,
        ForwardMode::Dropout { p } => {
            validate_dropout(p)?;
            let width = params.arch.trunk_out_dim();
            Some((draw_mask(rng, width, p), draw_mask(rng, width, p)))
        }
    };
    Ok(forward_with_masks(params, x, masks))
}

/// Deterministic forward pass without keeping the cache.
pub fn predict(params: &ModelParams, x: &[f64]) -> Result<HeteroPrediction> {
    check_input(params, x)?;
    Ok(forward_with_masks(params, x, None).0)
}

fn forward_with_masks(
    params: &ModelParams,
    x: &[f64],
    masks: Option<(Vec<f64>, Vec<f64>)>,
) -> (HeteroPrediction, ForwardCache) {
    let act = params.arch.activation;
    let mut trunk_pre = Vec::with_capacity(params.layers.trunk.len());
    let mut trunk_post = Vec::with_capacity(params.layers.trunk.len());
    let mut h = x.to_vec();
    for dense in &params.layers.trunk {
        let z = dense.affine(&h);
        h = z.iter().map(|&v| act.apply(v)).collect();
        trunk_pre.push(z);
        trunk_post.push(h.clone());
    }

    let (score_mask, logvar_mask) = match masks {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    let score = head_forward(&params.layers.score_head, act, &h, score_mask);
    let logvar = head_forward(&params.layers.logvar_head, act, &h, logvar_mask);

    let s = logvar.output.clamp(LOGVAR_MIN, LOGVAR_MAX);
    let pred = HeteroPrediction::new(score.output, s);
    let cache = ForwardCache {
        x: x.to_vec(),
        trunk_pre,
        trunk_post,
        score,
        logvar_clamped: s != logvar.output,
        logvar,
    };
    (pred, cache)
}

fn check_cache(cache: &ForwardCache, params: &ModelParams) -> Result<()> {
    let arch = &params.arch;
    let ok = cache.x.len() == arch.input_dim
        && cache.trunk_post.len() == arch.trunk_dims.len()
        && cache
            .trunk_post
            .iter()
            .zip(&arch.trunk_dims)
            .all(|(a, &w)| a.len() == w)
        && cache.score.input.len() == arch.trunk_out_dim()
        && cache.logvar.input.len() == arch.trunk_out_dim()
        && cache.score.hidden_post.len() == arch.head_hidden_dim
        && cache.logvar.hidden_post.len() == arch.head_hidden_dim;
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(
            "forward cache does not match parameters".into(),
        ))
    }
}

fn head_backward(
    grads: &mut Head,
    head: &Head,
    cache: &HeadCache,
    act: Activation,
    d_out: f64,
    d_shared: &mut [f64],
) {
    if d_out == 0.0 {
        return;
    }
    let d_hidden_post = grads
        .output
        .accumulate(&head.output, &[d_out], &cache.hidden_post);
    let d_hidden_pre: Vec<f64> = d_hidden_post
        .iter()
        .zip(cache.hidden_pre.iter().zip(&cache.hidden_post))
        .map(|(d, (&z, &a))| d * act.derivative(z, a))
        .collect();
    let d_input = grads
        .hidden
        .accumulate(&head.hidden, &d_hidden_pre, &cache.input);
    match &cache.mask {
        Some(mask) => d_shared
            .iter_mut()
            .zip(d_input.iter().zip(mask))
            .for_each(|(acc, (d, k))| *acc += d * k),
        None => d_shared
            .iter_mut()
            .zip(&d_input)
            .for_each(|(acc, d)| *acc += d),
    }
}

/// Adds `dL/dtheta` for upstream gradients `(d_y_hat, d_s)` into `grads`.
/// Dropout masks recorded in `cache` are replayed. When the log-variance was
/// clamped its gradient is zero.
pub fn backward_into(
    cache: &ForwardCache,
    params: &ModelParams,
    d_y_hat: f64,
    d_s: f64,
    grads: &mut Gradients,
) -> Result<()> {
    check_cache(cache, params)?;
    if !grads.same_shape(&params.layers) {
        return Err(Error::Shape(
            "gradient buffer does not match parameters".into(),
        ));
    }
    let act = params.arch.activation;
    let d_s = if cache.logvar_clamped { 0.0 } else { d_s };

    let mut d_shared = vec![0.0; params.arch.trunk_out_dim()];
    head_backward(
        &mut grads.score_head,
        &params.layers.score_head,
        &cache.score,
        act,
        d_y_hat,
        &mut d_shared,
    );
    head_backward(
        &mut grads.logvar_head,
        &params.layers.logvar_head,
        &cache.logvar,
        act,
        d_s,
        &mut d_shared,
    );

    let mut delta = d_shared;
    for idx in (0..params.layers.trunk.len()).rev() {
        let z = &cache.trunk_pre[idx];
        let a = &cache.trunk_post[idx];
        delta
            .iter_mut()
            .zip(z.iter().zip(a))
            .for_each(|(d, (&z, &a))| *d *= act.derivative(z, a));
        let input = if idx == 0 {
            &cache.x
        } else {
            &cache.trunk_post[idx - 1]
        };
        delta = grads.trunk[idx].accumulate(&params.layers.trunk[idx], &delta, input);
    }
    Ok(())
}

pub fn backward(
    cache: &ForwardCache,
    params: &ModelParams,
    d_y_hat: f64,
    d_s: f64,
) -> Result<Gradients> {
    let mut grads = Layers::zeros(&params.arch);
    backward_into(cache, params, d_y_hat, d_s, &mut grads)?;
    Ok(grads)
}
