//! Quality and uncertainty metrics.
//!
//! Quality: MSE and system-level Spearman correlation. Uncertainty: Gaussian
//! NLL, uncertainty calibration error (UCE), sharpness, and ROC AUC for
//! in-domain vs OOD detection. Also the binned error-uncertainty curve and the
//! selective-prediction sweep.
//!
//! Every uncertainty here is a variance, in squared score units.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ln(2 pi) / 2`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub system_id: String,
    pub y_true: f64,
    pub y_pred: f64,
    pub var_pred: f64,
    /// 0 in-domain, 1 OOD.
    pub domain_label: Option<u8>,
}

impl EvalRecord {
    pub fn sq_err(&self) -> f64 {
        (self.y_true - self.y_pred).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub srcc_system: f64,
    pub nll: f64,
    pub uce: f64,
    pub sharpness: f64,
    pub auc: Option<f64>,
}

fn non_empty(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        Err(Error::Input("no records to evaluate".into()))
    } else {
        Ok(())
    }
}

pub fn mse(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    Ok(records.iter().map(EvalRecord::sq_err).sum::<f64>() / records.len() as f64)
}

/// Fractional ranks (1-based); tied values share the average of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation of per-system mean labels vs mean predictions.
pub fn srcc_system(records: &[EvalRecord]) -> Result<f64> {
    let mut systems: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let e = systems.entry(r.system_id.as_str()).or_default();
        e.0 += r.y_true;
        e.1 += r.y_pred;
        e.2 += 1;
    }
    if systems.len() < 2 {
        return Err(Error::Input(format!(
            "system-level SRCC needs at least 2 systems, got {}",
            systems.len()
        )));
    }
    let (truth, pred): (Vec<f64>, Vec<f64>) = systems
        .values()
        .map(|&(t, p, n)| (t / n as f64, p / n as f64))
        .unzip();
    pearson(&average_ranks(&truth), &average_ranks(&pred))
        .ok_or_else(|| Error::Input("system means are constant; SRCC undefined".into()))
}

/// Mean Gaussian NLL of `y_true` under `N(y_pred, var_pred)`.
pub fn nll_metric(records: &[EvalRecord], include_const: bool) -> Result<f64> {
    non_empty(records)?;
    let mut total = 0.0;
    for r in records {
        if r.var_pred.is_nan() || r.var_pred <= 0.0 {
            return Err(Error::Input(format!(
                "record {} has non-positive variance",
                r.id
            )));
        }
        total += 0.5 * r.var_pred.ln() + r.sq_err() / (2.0 * r.var_pred);
    }
    let c = if include_const {
        0.5 * (2.0 * PI).ln()
    } else {
        0.0
    };
    Ok(total / records.len() as f64 + c)
}

/// Bin index for `v` among `m` equal-width, right-closed bins over `[lo, hi]`.
/// The first bin also holds `lo`.
fn equal_width_bin(v: f64, lo: f64, hi: f64, m: usize) -> usize {
    if hi <= lo || v <= lo {
        return 0;
    }
    let pos = (v - lo) / (hi - lo) * m as f64;
    (pos.ceil() as usize).clamp(1, m) - 1
}

/// Uncertainty calibration error: `sum_m |B_m|/n * |err(B_m) - uncert(B_m)|`
/// over `bins` equal-width bins spanning the observed variance range, where
/// `err` is the mean squared error and `uncert` the mean variance in the bin.
pub fn uce(records: &[EvalRecord], bins: usize) -> Result<f64> {
    non_empty(records)?;
    if bins == 0 {
        return Err(Error::Input("UCE needs at least one bin".into()));
    }
    let lo = records
        .iter()
        .map(|r| r.var_pred)
        .fold(f64::INFINITY, f64::min);
    let hi = records
        .iter()
        .map(|r| r.var_pred)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut acc = vec![(0.0, 0.0, 0usize); bins];
    for r in records {
        let b = &mut acc[equal_width_bin(r.var_pred, lo, hi, bins)];
        b.0 += r.sq_err();
        b.1 += r.var_pred;
        b.2 += 1;
    }
    let n = records.len() as f64;
    Ok(acc
        .iter()
        .filter(|b| b.2 > 0)
        .map(|&(err, unc, k)| (k as f64 / n) * ((err - unc) / k as f64).abs())
        .sum())
}

/// Mean predicted variance.
pub fn sharpness(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    Ok(records.iter().map(|r| r.var_pred).sum::<f64>() / records.len() as f64)
}

/// Probability that a random positive scores above a random negative, ties
/// counting one half. Computed from rank sums.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.iter().filter(|&&l| l == 0).count();
    if n_pos + n_neg != labels.len() {
        return Err(Error::Input("labels must be 0 or 1".into()));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Input("AUC needs both classes present".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("NaN score".into()));
    }
    let ranks = average_ranks(scores);
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub mean_uncert: f64,
    pub mean_sq_err: f64,
}

/// Sorts by predicted variance and splits into `num_bins` equal-count bins
/// (the last bin takes the remainder). A calibrated model lies on the
/// diagonal `mean_sq_err == mean_uncert`.
pub fn error_uncertainty_curve(records: &[EvalRecord], num_bins: usize) -> Result<Vec<CurvePoint>> {
    non_empty(records)?;
    if num_bins == 0 || num_bins > records.len() {
        return Err(Error::Input(format!(
            "num_bins must be in 1..={}, got {num_bins}",
            records.len()
        )));
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.var_pred.total_cmp(&b.var_pred));
    let size = records.len() / num_bins;
    Ok((0..num_bins)
        .map(|b| {
            let end = if b + 1 == num_bins {
                sorted.len()
            } else {
                (b + 1) * size
            };
            let chunk = &sorted[b * size..end];
            let k = chunk.len() as f64;
            CurvePoint {
                mean_uncert: chunk.iter().map(|r| r.var_pred).sum::<f64>() / k,
                mean_sq_err: chunk.iter().map(|r| r.sq_err()).sum::<f64>() / k,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectivePoint {
    pub threshold: f64,
    pub retained_fraction: f64,
    /// `None` when nothing is retained.
    pub subset_mse: Option<f64>,
}

/// For each threshold, keeps records with `var_pred <= threshold` and reports
/// the kept fraction and their MSE.
pub fn selective_sweep(records: &[EvalRecord], thresholds: &[f64]) -> Result<Vec<SelectivePoint>> {
    non_empty(records)?;
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Input("thresholds must be sorted ascending".into()));
    }
    let n = records.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let (k, sum) = records
                .iter()
                .filter(|r| r.var_pred <= t)
                .fold((0usize, 0.0), |(k, s), r| (k + 1, s + r.sq_err()));
            SelectivePoint {
                threshold: t,
                retained_fraction: k as f64 / n,
                subset_mse: (k > 0).then(|| sum / k as f64),
            }
        })
        .collect())
}

/// `num` evenly spaced quantiles (1/num, 2/num, ..., 1) of the predicted variances.
pub fn quantile_thresholds(records: &[EvalRecord], num: usize) -> Vec<f64> {
    let mut vars: Vec<f64> = records.iter().map(|r| r.var_pred).collect();
    vars.sort_by(f64::total_cmp);
    if vars.is_empty() || num == 0 {
        return Vec::new();
    }
    (1..=num)
        .map(|q| {
            let idx = ((q * vars.len()).div_ceil(num)).max(1) - 1;
            vars[idx]
        })
        .collect()
}

/// All report metrics. AUC uses `var_pred` as the OOD score and is `None`
/// unless every record carries a domain label and both classes occur.
pub fn report(records: &[EvalRecord], uce_bins: usize) -> Result<MetricsReport> {
    let labels: Option<Vec<u8>> = records.iter().map(|r| r.domain_label).collect();
    let auc = match labels {
        Some(l) if l.contains(&0) && l.contains(&1) => {
            let scores: Vec<f64> = records.iter().map(|r| r.var_pred).collect();
            Some(roc_auc(&scores, &l)?)
        }
        _ => None,
    };
    Ok(MetricsReport {
        mse: mse(records)?,
        srcc_system: srcc_system(records)?,
        nll: nll_metric(records, true)?,
        uce: uce(records, uce_bins)?,
        sharpness: sharpness(records)?,
        auc,
    })
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("mean_uncert,mean_sq_err\n");
    for p in points {
        out.push_str(&format!("{},{}\n", p.mean_uncert, p.mean_sq_err));
    }
    out
}

pub fn selective_csv(points: &[SelectivePoint]) -> String {
    let mut out = String::from("threshold,retained_fraction,subset_mse\n");
    for p in points {
        let mse = p.subset_mse.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{}\n",
            p.threshold, p.retained_fraction, mse
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(sys: &str, y_true: f64, y_pred: f64, var: f64) -> EvalRecord {
        EvalRecord {
            id: format!("{sys}-{y_true}-{y_pred}"),
            system_id: sys.into(),
            y_true,
            y_pred,
            var_pred: var,
            domain_label: None,
        }
    }

    /// Records with a prescribed squared residual.
    fn with_sq(var: f64, sq: f64) -> EvalRecord {
        rec("a", sq.sqrt(), 0.0, var)
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[rec("a", 1.0, 1.0, 1.0)]).unwrap(), 0.0);
        assert_eq!(
            mse(&[rec("a", 1.0, 0.0, 1.0), rec("a", 0.0, 1.0, 1.0)]).unwrap(),
            1.0
        );
        assert_eq!(
            mse(&[rec("a", 0.5, 0.0, 1.0), rec("a", 1.5, 0.0, 1.0)]).unwrap(),
            1.25
        );
        assert!(mse(&[]).is_err());
    }

    #[test]
    fn srcc_examples() {
        let make = |t: &[f64], p: &[f64]| -> Vec<EvalRecord> {
            t.iter()
                .zip(p)
                .enumerate()
                .flat_map(|(i, (&t, &p))| {
                    let s = format!("s{i}");
                    vec![
                        rec(&s, t - 0.1, p + 0.2, 1.0),
                        rec(&s, t + 0.1, p - 0.2, 1.0),
                    ]
                })
                .collect()
        };
        assert!(
            (srcc_system(&make(&[1.0, 2.0, 3.0], &[0.1, 0.5, 0.7])).unwrap() - 1.0).abs() < 1e-12
        );
        assert!(
            (srcc_system(&make(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0])).unwrap() + 1.0).abs() < 1e-12
        );
        let v = srcc_system(&make(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0])).unwrap();
        assert!((v - 0.8).abs() < 1e-9);
        assert!(srcc_system(&[rec("one", 1.0, 1.0, 1.0)]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 20.0, 5.0]),
            vec![2.0, 3.5, 3.5, 1.0]
        );
    }

    #[test]
    fn nll_examples() {
        let zero = [rec("a", 1.0, 1.0, 1.0)];
        assert!((nll_metric(&zero, true).unwrap() - 0.918939).abs() < 1e-6);
        assert_eq!(nll_metric(&zero, false).unwrap(), 0.0);
        assert_eq!(nll_metric(&[rec("a", 2.0, 1.0, 1.0)], false).unwrap(), 0.5);
        assert!(nll_metric(&[rec("a", 2.0, 1.0, 0.0)], false).is_err());
    }

    #[test]
    fn uce_examples() {
        let perfect: Vec<_> = [0.1, 0.7, 2.0, 0.3]
            .iter()
            .map(|&v| with_sq(v, v))
            .collect();
        for m in [1, 3, 10] {
            assert!(uce(&perfect, m).unwrap().abs() < 1e-12);
        }
        assert!((uce(&[with_sq(0.5, 0.9)], 10).unwrap() - 0.4).abs() < 1e-12);
        let two = [with_sq(0.2, 0.1), with_sq(0.4, 0.9)];
        assert!((uce(&two, 1).unwrap() - 0.2).abs() < 1e-12);
        assert!(uce(&[], 10).is_err());
    }

    #[test]
    fn equal_width_bins_are_right_closed() {
        // [0, 1] in 4 bins: (0,0.25], (0.25,0.5], ...; 0 joins the first bin.
        assert_eq!(equal_width_bin(0.0, 0.0, 1.0, 4), 0);
        assert_eq!(equal_width_bin(0.25, 0.0, 1.0, 4), 0);
        assert_eq!(equal_width_bin(0.2500001, 0.0, 1.0, 4), 1);
        assert_eq!(equal_width_bin(1.0, 0.0, 1.0, 4), 3);
        assert_eq!(equal_width_bin(3.0, 3.0, 3.0, 4), 0);
    }

    #[test]
    fn sharpness_examples() {
        assert_eq!(sharpness(&[with_sq(0.0, 1.0)]).unwrap(), 0.0);
        assert_eq!(
            sharpness(&[with_sq(1.0, 1.0), with_sq(3.0, 1.0)]).unwrap(),
            2.0
        );
        assert_eq!(sharpness(&vec![with_sq(0.7, 1.0); 5]).unwrap(), 0.7);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!((roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap() - 0.75).abs() < 1e-12);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(roc_auc(&[0.1, 0.2], &[1, 2]).is_err());
    }

    #[test]
    fn curve_examples() {
        let perfect: Vec<_> = [0.1, 0.7, 2.0, 0.3, 1.1]
            .iter()
            .map(|&v| with_sq(v, v))
            .collect();
        for p in error_uncertainty_curve(&perfect, 2).unwrap() {
            assert!((p.mean_sq_err - p.mean_uncert).abs() < 1e-12);
        }
        let one = error_uncertainty_curve(&perfect, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one[0].mean_uncert - sharpness(&perfect).unwrap()).abs() < 1e-12);
        assert!((one[0].mean_sq_err - mse(&perfect).unwrap()).abs() < 1e-12);

        let four = [
            with_sq(3.0, 9.0),
            with_sq(1.0, 1.0),
            with_sq(4.0, 9.0),
            with_sq(2.0, 1.0),
        ];
        let pts = error_uncertainty_curve(&four, 2).unwrap();
        assert!(
            (pts[0].mean_uncert - 1.5).abs() < 1e-12 && (pts[0].mean_sq_err - 1.0).abs() < 1e-12
        );
        assert!(
            (pts[1].mean_uncert - 3.5).abs() < 1e-12 && (pts[1].mean_sq_err - 9.0).abs() < 1e-12
        );
        assert!(error_uncertainty_curve(&four, 5).is_err());
    }

    #[test]
    fn curve_last_bin_takes_remainder() {
        let recs: Vec<_> = (1..=7).map(|v| with_sq(v as f64, 0.0)).collect();
        let pts = error_uncertainty_curve(&recs, 3).unwrap();
        // bins {1,2}, {3,4}, {5,6,7}
        assert_eq!(pts[2].mean_uncert, 6.0);
    }

    #[test]
    fn selective_examples() {
        let recs = [with_sq(0.1, 0.0), with_sq(0.2, 1.0), with_sq(0.3, 4.0)];
        let pts = selective_sweep(&recs, &[0.05, 0.2, 10.0]).unwrap();
        assert_eq!(pts[0].retained_fraction, 0.0);
        assert_eq!(pts[0].subset_mse, None);
        assert!((pts[1].retained_fraction - 2.0 / 3.0).abs() < 1e-12);
        assert!((pts[1].subset_mse.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(pts[2].retained_fraction, 1.0);
        assert!((pts[2].subset_mse.unwrap() - mse(&recs).unwrap()).abs() < 1e-12);
        assert!(selective_sweep(&recs, &[0.3, 0.1]).is_err());
        let csv = selective_csv(&pts);
        assert!(csv.starts_with("threshold,retained_fraction,subset_mse\n0.05,0,\n"));
    }

    #[test]
    fn quantile_thresholds_end_at_max() {
        let recs: Vec<_> = (1..=10).map(|v| with_sq(v as f64, 0.0)).collect();
        assert_eq!(
            quantile_thresholds(&recs, 5),
            vec![2.0, 4.0, 6.0, 8.0, 10.0]
        );
    }

    #[test]
    fn report_auc_only_with_both_classes() {
        let mut recs = vec![
            rec("a", 1.0, 1.2, 0.3),
            rec("b", 2.0, 1.9, 0.5),
            rec("c", 3.0, 3.3, 0.9),
        ];
        assert_eq!(report(&recs, 10).unwrap().auc, None);
        for (r, l) in recs.iter_mut().zip([0, 0, 1]) {
            r.domain_label = Some(l);
        }
        assert_eq!(report(&recs, 10).unwrap().auc, Some(1.0));
        let json = serde_json::to_value(report(&recs, 10).unwrap()).unwrap();
        for key in ["mse", "srcc_system", "nll", "uce", "sharpness", "auc"] {
            assert!(json.get(key).is_some());
        }
    }

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    total += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        total / pairs
    }

    proptest! {
        #[test]
        fn auc_matches_pair_enumeration(
            data in proptest::collection::vec((0u8..6, 0u8..2), 2..50)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 * 0.5).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            prop_assert!((roc_auc(&scores, &labels).unwrap() - brute_auc(&scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_to_monotone_transform(
            data in proptest::collection::vec((-5.0f64..5.0, 0u8..2), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let t: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&t, &labels).unwrap());
        }

        #[test]
        fn srcc_invariant_to_monotone_transform(
            means in proptest::collection::vec((0.0f64..5.0, 0.0f64..5.0), 3..12)
        ) {
            let recs: Vec<_> = means.iter().enumerate()
                .map(|(i, &(t, p))| rec(&format!("s{i}"), t, p, 1.0)).collect();
            let transformed: Vec<_> = recs.iter()
                .map(|r| EvalRecord { y_pred: r.y_pred.powi(3) + 2.0, y_true: (r.y_true * 0.5).exp(), ..r.clone() })
                .collect();
            match (srcc_system(&recs), srcc_system(&transformed)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn uce_non_negative(
            data in proptest::collection::vec((0.0f64..3.0, -2.0f64..2.0), 1..60),
            bins in 1usize..15,
        ) {
            let recs: Vec<_> = data.iter().map(|&(v, e)| rec("a", e, 0.0, v)).collect();
            prop_assert!(uce(&recs, bins).unwrap() >= 0.0);
        }

        #[test]
        fn nll_constant_offset(
            data in proptest::collection::vec((0.01f64..3.0, -2.0f64..2.0), 1..30),
        ) {
            let recs: Vec<_> = data.iter().map(|&(v, e)| rec("a", e, 0.0, v)).collect();
            let d = nll_metric(&recs, true).unwrap() - nll_metric(&recs, false).unwrap();
            prop_assert!((d - HALF_LN_2PI).abs() < 1e-12);
        }
    }
}
