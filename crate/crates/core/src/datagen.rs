//! Synthetic MOS-like data with known ground-truth noise.
//!
//! Each system `k` owns a cluster center `mu_k ~ N(0, I)`; its utterances have
//! features `x ~ N(mu_k, I)` and a clean score `g(x) = 3 + 2 tanh(w.x + b)`, so
//! `g` stays inside the open interval (1, 5). Labels add noise according to the
//! configured [`NoiseModel`]. All "world" quantities (centers, `w`, `b`, the
//! noise-scale direction, the OOD shift direction) come from the seed alone,
//! while per-sample draws come from a separate stream selected by
//! `draw_stream`, so independent datasets can be drawn from the same world.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::rng;

/// Scale from waveform-domain noise amplitudes (as used on raw audio, e.g.
/// 0.002 to 0.02) to feature-noise levels relative to the global feature
/// standard deviation. The strongest waveform level, 0.02, maps to one
/// feature standard deviation.
pub const WAVEFORM_NOISE_GAIN: f64 = 50.0;

/// Feature-noise level equivalent to a waveform noise amplitude.
pub fn waveform_noise_analogue(waveform_level: f64) -> f64 {
    waveform_level * WAVEFORM_NOISE_GAIN
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    InDomain,
    Ood,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::InDomain => "in_domain",
            DomainTag::Ood => "ood",
        }
    }

    /// Binary label used for detection metrics: in-domain 0, OOD 1.
    pub fn label(self) -> u8 {
        match self {
            DomainTag::InDomain => 0,
            DomainTag::Ood => 1,
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_domain" => Ok(DomainTag::InDomain),
            "ood" => Ok(DomainTag::Ood),
            other => Err(Error::Input(format!("unknown domain_tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub system_id: String,
    pub features: Vec<f64>,
    pub y: f64,
    pub domain_tag: DomainTag,
    /// Variance of the label noise, known only for generated data.
    pub true_noise_var: Option<f64>,
    /// Noise-free score `g(x)`. Generation-only oracle; not written to CSV.
    pub clean_score: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.len())
    }

    /// Population standard deviation over every feature entry.
    pub fn global_feature_std(&self) -> f64 {
        let values = self.samples.iter().flat_map(|s| s.features.iter().copied());
        let (n, sum) = values
            .clone()
            .fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
        if n == 0 {
            return 0.0;
        }
        let mean = sum / n as f64;
        (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
    }

    pub fn concat(mut self, other: Dataset) -> Dataset {
        self.samples.extend(other.samples);
        self
    }

    pub fn with_domain_tag(mut self, tag: DomainTag) -> Dataset {
        self.samples.iter_mut().for_each(|s| s.domain_tag = tag);
        self
    }

    /// Seeded shuffle into `(train, val, test)`. Validation and test sizes
    /// are `floor(n * fraction)`; the remainder goes to train.
    pub fn split(&self, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
            || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split fractions {fractions:?} must be in [0,1] and sum to 1"
            )));
        }
        let n = self.len();
        let n_val = (n as f64 * fractions[1]).floor() as usize;
        let n_test = (n as f64 * fractions[2]).floor() as usize;
        let n_train = n - n_val - n_test;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, 7));
        let take =
            |idx: &[usize]| Dataset::new(idx.iter().map(|&i| self.samples[i].clone()).collect());
        Ok((
            take(&order[..n_train]),
            take(&order[n_train..n_train + n_val]),
            take(&order[n_train + n_val..]),
        ))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let dim = self.feature_dim().unwrap_or(0);
        let mut header = vec![
            "id".to_string(),
            "system_id".into(),
            "domain_tag".into(),
            "y".into(),
            "true_noise_var".into(),
        ];
        header.extend((0..dim).map(|i| format!("f{i}")));
        wtr.write_record(&header)?;
        for s in &self.samples {
            if s.features.len() != dim {
                return Err(Error::Shape(format!("sample {} has ragged features", s.id)));
            }
            let mut row = vec![
                s.id.clone(),
                s.system_id.clone(),
                s.domain_tag.to_string(),
                s.y.to_string(),
                s.true_noise_var.map(|v| v.to_string()).unwrap_or_default(),
            ];
            row.extend(s.features.iter().map(|v| v.to_string()));
            wtr.write_record(&row)?;
        }
        let bytes = wtr
            .into_inner()
            .map_err(|e| Error::Input(format!("csv buffer: {e}")))?;
        write_atomic(path, &bytes)
    }

    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let header = rdr.headers()?.clone();
        let fixed = ["id", "system_id", "domain_tag", "y", "true_noise_var"];
        let header_ok = header.len() >= fixed.len()
            && header.iter().zip(fixed).all(|(a, b)| a == b)
            && header
                .iter()
                .skip(fixed.len())
                .enumerate()
                .all(|(i, h)| h == format!("f{i}"));
        if !header_ok {
            return Err(Error::Input(format!(
                "{}: header must be id,system_id,domain_tag,y,true_noise_var,f0,...",
                path.display()
            )));
        }
        let mut samples = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = row + 2;
            let num = |field: &str, col: usize| -> Result<f64> {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    column: col + 1,
                    message: format!("invalid number {field:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Input(format!(
                        "{}:{line}: non-finite value",
                        path.display()
                    )));
                }
                Ok(v)
            };
            let features = rec
                .iter()
                .enumerate()
                .skip(fixed.len())
                .map(|(col, f)| num(f, col))
                .collect::<Result<Vec<_>>>()?;
            let true_noise_var = match &rec[4] {
                "" => None,
                v => Some(num(v, 4)?),
            };
            samples.push(Sample {
                id: rec[0].to_string(),
                system_id: rec[1].to_string(),
                domain_tag: rec[2].parse()?,
                y: num(&rec[3], 3)?,
                true_noise_var,
                features,
                clean_score: None,
            });
        }
        Ok(Dataset { samples })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    /// `eps ~ N(0, sigma^2)`.
    Homoscedastic { sigma: f64 },
    /// `eps ~ N(0, sigma(x)^2)` with `sigma(x) = 0.05 + 0.5 sigmoid(v.x + c)`.
    Heteroscedastic,
    /// Label is the mean of `raters` scores, each `g(x) + N(0, rater_sd^2)`.
    RaterPanel { raters: usize, rater_sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub num_systems: usize,
    pub samples_per_system: usize,
    pub feature_dim: usize,
    pub noise_model: NoiseModel,
    pub seed: u64,
    /// Selects the per-sample random stream; the world is fixed by `seed`.
    #[serde(default)]
    pub draw_stream: u64,
    /// Clip labels to the [1, 5] MOS range. Off by default so the Gaussian
    /// likelihood of the labels stays exact.
    #[serde(default)]
    pub clip_labels: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_systems: 20,
            samples_per_system: 250,
            feature_dim: 16,
            noise_model: NoiseModel::Heteroscedastic,
            seed: 0,
            draw_stream: 0,
            clip_labels: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_systems == 0 || self.samples_per_system == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "num_systems, samples_per_system and feature_dim must be positive".into(),
            ));
        }
        match self.noise_model {
            NoiseModel::Homoscedastic { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::Config(format!("sigma must be >= 0, got {sigma}")))
            }
            NoiseModel::RaterPanel { raters, rater_sd }
                if raters == 0 || rater_sd.is_nan() || rater_sd <= 0.0 =>
            {
                Err(Error::Config(
                    "rater panel needs raters >= 1 and rater_sd > 0".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Seed-determined parameters shared by every dataset drawn from one config.
#[derive(Debug, Clone)]
pub struct World {
    pub centers: Vec<Vec<f64>>,
    pub score_w: Vec<f64>,
    pub score_b: f64,
    pub noise_v: Vec<f64>,
    pub noise_c: f64,
    /// Unit vector along which OOD clusters are translated.
    pub shift_dir: Vec<f64>,
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect::<Vec<f64>>()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl World {
    pub fn new(cfg: &GenConfig) -> Self {
        let d = cfg.feature_dim;
        let mut rng = rng::stream(cfg.seed, 0);
        let proj_scale = 1.0 / (d as f64).sqrt();
        let centers = (0..cfg.num_systems)
            .map(|_| normal_vec(&mut rng, d, 1.0))
            .collect();
        let score_w = normal_vec(&mut rng, d, proj_scale);
        let score_b: f64 = 0.25 * rng.sample::<f64, _>(StandardNormal);
        let noise_v = normal_vec(&mut rng, d, proj_scale);
        let noise_c: f64 = rng.sample(StandardNormal);
        let mut shift_dir = normal_vec(&mut rng, d, 1.0);
        let norm = dot(&shift_dir, &shift_dir).sqrt();
        shift_dir.iter_mut().for_each(|v| *v /= norm);
        Self {
            centers,
            score_w,
            score_b,
            noise_v,
            noise_c,
            shift_dir,
        }
    }

    /// Noise-free score, always inside (1, 5).
    pub fn clean_score(&self, x: &[f64]) -> f64 {
        3.0 + 2.0 * (dot(&self.score_w, x) + self.score_b).tanh()
    }

    /// Label-noise standard deviation of the heteroscedastic model.
    pub fn hetero_sigma(&self, x: &[f64]) -> f64 {
        0.05 + 0.5 * sigmoid(dot(&self.noise_v, x) + self.noise_c)
    }
}

fn generate(cfg: &GenConfig, shift: f64, tag: DomainTag, id_prefix: &str) -> Result<Dataset> {
    cfg.validate()?;
    if !(shift >= 0.0 && shift.is_finite()) {
        return Err(Error::Config(format!("shift must be >= 0, got {shift}")));
    }
    let world = World::new(cfg);
    let mut rng = rng::stream(cfg.seed, 1 + cfg.draw_stream);
    let mut samples = Vec::with_capacity(cfg.num_systems * cfg.samples_per_system);
    for (k, center) in world.centers.iter().enumerate() {
        let center: Vec<f64> = center
            .iter()
            .zip(&world.shift_dir)
            .map(|(c, u)| c + shift * u)
            .collect();
        let system_id = format!("sys{k:03}");
        for i in 0..cfg.samples_per_system {
            let features: Vec<f64> = center
                .iter()
                .map(|c| c + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let g = world.clean_score(&features);
            let (y, noise_var) = match cfg.noise_model {
                NoiseModel::Homoscedastic { sigma } => (
                    g + sigma * rng.sample::<f64, _>(StandardNormal),
                    sigma * sigma,
                ),
                NoiseModel::Heteroscedastic => {
                    let sigma = world.hetero_sigma(&features);
                    (
                        g + sigma * rng.sample::<f64, _>(StandardNormal),
                        sigma * sigma,
                    )
                }
                NoiseModel::RaterPanel { raters, rater_sd } => {
                    let total: f64 = (0..raters)
                        .map(|_| g + rater_sd * rng.sample::<f64, _>(StandardNormal))
                        .sum();
                    (total / raters as f64, rater_sd * rater_sd / raters as f64)
                }
            };
            let y = if cfg.clip_labels {
                y.clamp(1.0, 5.0)
            } else {
                y
            };
            samples.push(Sample {
                id: format!("{id_prefix}{system_id}-{i:05}"),
                system_id: system_id.clone(),
                features,
                y,
                domain_tag: tag,
                true_noise_var: Some(noise_var),
                clean_score: Some(g),
            });
        }
    }
    Ok(Dataset { samples })
}

pub fn gen_synthetic(cfg: &GenConfig) -> Result<Dataset> {
    generate(cfg, 0.0, DomainTag::InDomain, "")
}

/// Same world as [`gen_synthetic`] with every cluster center moved `shift`
/// units along a seed-derived unit direction. Samples are tagged OOD.
pub fn gen_ood_shift(cfg: &GenConfig, shift: f64) -> Result<Dataset> {
    generate(cfg, shift, DomainTag::Ood, "ood-")
}

/// Adds `N(0, (level * global_feature_std)^2)` to every feature entry. Labels
/// are untouched; samples are tagged OOD when `level > 0`.
pub fn add_feature_noise(dataset: &Dataset, level: f64, seed: u64) -> Result<Dataset> {
    if !(level >= 0.0 && level.is_finite()) {
        return Err(Error::Config(format!(
            "noise level must be >= 0, got {level}"
        )));
    }
    if level == 0.0 {
        return Ok(dataset.clone());
    }
    let sd = level * dataset.global_feature_std();
    let mut rng = rng::stream(seed, 3);
    let mut out = dataset.clone();
    for s in &mut out.samples {
        for f in &mut s.features {
            *f += sd * rng.sample::<f64, _>(StandardNormal);
        }
        s.domain_tag = DomainTag::Ood;
    }
    Ok(out)
}
