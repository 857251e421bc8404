//! Scoring datasets with a trained checkpoint: deterministic predictions,
//! optional MC-dropout uncertainties, and the routing of one uncertainty into
//! [`EvalRecord`]s for the metrics.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{apply_scale, CalibrationScale};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::mcdropout::{mc_forward_batch, MCConfig, MCResult};
use crate::metrics::{roc_auc, EvalRecord};
use crate::net::{self, HeteroPrediction, ModelParams};

/// Which variance populates `var_pred`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyKind {
    Aleatoric,
    EpiPred,
    EpiDist,
}

impl FromStr for UncertaintyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aleatoric" => Ok(Self::Aleatoric),
            "epi-pred" => Ok(Self::EpiPred),
            "epi-dist" => Ok(Self::EpiDist),
            _ => Err(Error::Config(format!("unknown uncertainty kind {s:?}"))),
        }
    }
}

/// Which point prediction populates `y_pred`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointKind {
    #[default]
    Deterministic,
    McMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleScores {
    pub id: String,
    pub system_id: String,
    pub y_true: f64,
    pub domain_label: u8,
    /// Deterministic prediction with the calibration scale applied.
    pub det: HeteroPrediction,
    pub mc: Option<MCResult>,
}

/// Runs every sample of `ds` through the network. MC passes for sample `i`
/// use a seed derived from `(mc.seed, i)`.
pub fn score_dataset(
    params: &ModelParams,
    scale: Option<&CalibrationScale>,
    ds: &Dataset,
    mc: Option<&MCConfig>,
) -> Result<Vec<SampleScores>> {
    let det: Vec<HeteroPrediction> = ds
        .samples
        .par_iter()
        .map(|s| {
            let p = net::predict(params, &s.features)?;
            Ok(scale.map_or(p, |sc| apply_scale(&p, sc)))
        })
        .collect::<Result<_>>()?;
    let mc_results: Option<Vec<MCResult>> = mc
        .map(|cfg| {
            mc_forward_batch(
                params,
                ds.samples.par_iter().map(|s| s.features.as_slice()),
                cfg,
                scale,
            )
        })
        .transpose()?;
    let mut mc_iter = mc_results.map(Vec::into_iter);
    Ok(ds
        .samples
        .iter()
        .zip(det)
        .map(|(s, det)| SampleScores {
            id: s.id.clone(),
            system_id: s.system_id.clone(),
            y_true: s.y,
            domain_label: s.domain_tag.label(),
            det,
            mc: mc_iter.as_mut().and_then(Iterator::next),
        })
        .collect())
}

impl SampleScores {
    pub fn point(&self, kind: PointKind) -> Result<f64> {
        match kind {
            PointKind::Deterministic => Ok(self.det.y_hat),
            PointKind::McMean => self.mc_result().map(|m| m.y_mean),
        }
    }

    /// Aleatoric variance follows the point prediction: deterministic
    /// `sigma^2`, or the MC average of `exp(s_t)`.
    pub fn uncertainty(&self, kind: UncertaintyKind, point: PointKind) -> Result<f64> {
        match (kind, point) {
            (UncertaintyKind::Aleatoric, PointKind::Deterministic) => Ok(self.det.sigma2),
            (UncertaintyKind::Aleatoric, PointKind::McMean) => {
                self.mc_result().map(|m| m.aleatoric_var)
            }
            (UncertaintyKind::EpiPred, _) => self.mc_result().map(|m| m.epi_pred_var),
            (UncertaintyKind::EpiDist, _) => self.mc_result().map(|m| m.epi_dist_var),
        }
    }

    fn mc_result(&self) -> Result<&MCResult> {
        self.mc
            .as_ref()
            .ok_or_else(|| Error::Config("MC dropout results required but not computed".into()))
    }
}

pub fn to_records(
    scores: &[SampleScores],
    uncertainty: UncertaintyKind,
    point: PointKind,
) -> Result<Vec<EvalRecord>> {
    scores
        .iter()
        .map(|s| {
            Ok(EvalRecord {
                id: s.id.clone(),
                system_id: s.system_id.clone(),
                y_true: s.y_true,
                y_pred: s.point(point)?,
                var_pred: s.uncertainty(uncertainty, point)?,
                domain_label: Some(s.domain_label),
            })
        })
        .collect()
}

/// Per-sample MC rows: `id,y_mean,y_det,aleatoric_var,epi_pred_var,epi_dist_var`.
pub fn mc_csv(scores: &[SampleScores]) -> Result<String> {
    let mut out = String::from("id,y_mean,y_det,aleatoric_var,epi_pred_var,epi_dist_var\n");
    for s in scores {
        let m = s.mc_result()?;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.id, m.y_mean, s.det.y_hat, m.aleatoric_var, m.epi_pred_var, m.epi_dist_var
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodScore {
    pub id: String,
    pub domain_label: u8,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub auc: f64,
    pub uncertainty: UncertaintyKind,
    pub num_in_domain: usize,
    pub num_ood: usize,
    pub mean_score_in_domain: f64,
    pub mean_score_ood: f64,
}

/// Scores the union of `in_domain` (label 0) and `ood` (label 1) by one
/// uncertainty and reports the detection AUC. Labels come from which input a
/// sample belongs to, not from its domain tag.
pub fn ood_detect(
    params: &ModelParams,
    scale: Option<&CalibrationScale>,
    in_domain: &Dataset,
    ood: &Dataset,
    mc: &MCConfig,
    uncertainty: UncertaintyKind,
) -> Result<(OodReport, Vec<OodScore>)> {
    let mut rows = Vec::with_capacity(in_domain.len() + ood.len());
    for (ds, label) in [(in_domain, 0u8), (ood, 1u8)] {
        for s in score_dataset(params, scale, ds, Some(mc))? {
            rows.push(OodScore {
                score: s.uncertainty(uncertainty, PointKind::Deterministic)?,
                id: s.id,
                domain_label: label,
            });
        }
    }
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.domain_label).collect();
    let auc = roc_auc(&scores, &labels)?;
    let mean_of = |label: u8| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.domain_label == label)
            .map(|r| r.score)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let report = OodReport {
        auc,
        uncertainty,
        num_in_domain: in_domain.len(),
        num_ood: ood.len(),
        mean_score_in_domain: mean_of(0),
        mean_score_ood: mean_of(1),
    };
    Ok((report, rows))
}

pub fn ood_scores_csv(rows: &[OodScore]) -> String {
    let mut out = String::from("id,domain_label,score\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.id, r.domain_label, r.score);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_synthetic, GenConfig};
    use crate::metrics::{mse, srcc_system};
    use crate::net::{init_params, ArchConfig};

    fn setup() -> (ModelParams, Dataset) {
        let ds = gen_synthetic(&GenConfig {
            num_systems: 4,
            samples_per_system: 10,
            ..GenConfig::default()
        })
        .unwrap();
        (init_params(&ArchConfig::default(), 2).unwrap(), ds)
    }

    #[test]
    fn epistemic_routing_needs_mc() {
        let (p, ds) = setup();
        let scores = score_dataset(&p, None, &ds, None).unwrap();
        assert!(to_records(
            &scores,
            UncertaintyKind::Aleatoric,
            PointKind::Deterministic
        )
        .is_ok());
        assert!(to_records(&scores, UncertaintyKind::EpiDist, PointKind::Deterministic).is_err());
        assert!(mc_csv(&scores).is_err());
    }

    #[test]
    fn routing_selects_requested_variance() {
        let (p, ds) = setup();
        let mc = MCConfig::default();
        let scores = score_dataset(&p, None, &ds, Some(&mc)).unwrap();
        let m = scores[3].mc.as_ref().unwrap();
        let get = |k| to_records(&scores, k, PointKind::Deterministic).unwrap()[3].var_pred;
        assert_eq!(get(UncertaintyKind::Aleatoric), scores[3].det.sigma2);
        assert_eq!(get(UncertaintyKind::EpiPred), m.epi_pred_var);
        assert_eq!(get(UncertaintyKind::EpiDist), m.epi_dist_var);
        let mean = to_records(&scores, UncertaintyKind::Aleatoric, PointKind::McMean).unwrap();
        assert_eq!(mean[3].y_pred, m.y_mean);
        assert_eq!(mean[3].var_pred, m.aleatoric_var);
        let csv = mc_csv(&scores).unwrap();
        assert!(csv.starts_with("id,y_mean,y_det,aleatoric_var,epi_pred_var,epi_dist_var\n"));
        assert_eq!(csv.lines().count(), ds.len() + 1);
    }

    #[test]
    fn calibration_leaves_quality_metrics_bit_identical() {
        let (p, ds) = setup();
        let raw = score_dataset(&p, None, &ds, None).unwrap();
        let cal = score_dataset(&p, Some(&CalibrationScale::from_r(1.7)), &ds, None).unwrap();
        let a = to_records(&raw, UncertaintyKind::Aleatoric, PointKind::Deterministic).unwrap();
        let b = to_records(&cal, UncertaintyKind::Aleatoric, PointKind::Deterministic).unwrap();
        assert_eq!(mse(&a).unwrap().to_bits(), mse(&b).unwrap().to_bits());
        assert_eq!(
            srcc_system(&a).unwrap().to_bits(),
            srcc_system(&b).unwrap().to_bits()
        );
        assert!((b[0].var_pred / a[0].var_pred - 1.7 * 1.7).abs() < 1e-12);
    }

    #[test]
    fn identical_pools_give_half_auc() {
        let (p, ds) = setup();
        let (report, rows) = ood_detect(
            &p,
            None,
            &ds,
            &ds,
            &MCConfig::default(),
            UncertaintyKind::EpiDist,
        )
        .unwrap();
        assert_eq!(report.auc, 0.5);
        assert_eq!(rows.len(), 2 * ds.len());
        assert!(ood_scores_csv(&rows).starts_with("id,domain_label,score\n"));
    }

    #[test]
    fn uncertainty_kind_parsing() {
        assert_eq!(
            "epi-dist".parse::<UncertaintyKind>().unwrap(),
            UncertaintyKind::EpiDist
        );
        assert!("total".parse::<UncertaintyKind>().is_err());
    }
}
