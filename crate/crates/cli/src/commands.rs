use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use mosuq::evaluate::{mc_csv, ood_detect, ood_scores_csv, score_dataset, to_records};
use mosuq::io::write_atomic;
use mosuq::metrics::{
    self, curve_csv, error_uncertainty_curve, quantile_thresholds, selective_csv, selective_sweep,
};
use mosuq::{
    add_feature_noise, apply_scale, datagen, fit_scale, gen_ood_shift, gen_synthetic,
    load_checkpoint, predict, save_checkpoint, train, ArchConfig, CalibrationScale, Checkpoint,
    Dataset, GenConfig, MCConfig, NoiseModel, PointKind, TrainConfig, UncertaintyKind,
};
use serde::Serialize;

use crate::args::{
    require, CalibrateArgs, DataPreset, EvaluateArgs, GenDataArgs, OodDetectArgs, RunPreset,
    TrainArgs, PAPER_BATCH, PAPER_BINS, PAPER_DROPOUT, PAPER_LR, PAPER_MC_PASSES,
};
use crate::UsageError;

const DEFAULT_SIGMA: f64 = 0.3;
const DEFAULT_RATERS: usize = 4;
const DEFAULT_RATER_SD: f64 = 0.8;
const DEFAULT_CURVE_BINS: usize = 10;
const DEFAULT_THRESHOLDS: usize = 20;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| mosuq::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into())
}

#[derive(Debug, Serialize)]
struct GenDataResolved {
    generator: GenConfig,
    ood_shift: Option<f64>,
    waveform_noise: Option<f64>,
    /// Relative feature-noise level actually applied.
    noise_level: Option<f64>,
    noise_seed: u64,
    split: Option<[f64; 3]>,
    split_seed: u64,
    outputs: Vec<PathBuf>,
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let out = require(args.out.clone(), "out")?;
    let preset = args.preset.unwrap_or(DataPreset::Heteroscedastic);
    if args.sigma.is_some() && preset != DataPreset::Homoscedastic {
        return Err(UsageError("--sigma requires --preset homoscedastic".into()).into());
    }
    if (args.raters.is_some() || args.rater_sd.is_some()) && preset != DataPreset::RaterPanel {
        return Err(UsageError("--raters/--rater-sd require --preset rater-panel".into()).into());
    }
    let noise_model = match preset {
        DataPreset::Homoscedastic => NoiseModel::Homoscedastic {
            sigma: args.sigma.unwrap_or(DEFAULT_SIGMA),
        },
        DataPreset::Heteroscedastic => NoiseModel::Heteroscedastic,
        DataPreset::RaterPanel => NoiseModel::RaterPanel {
            raters: args.raters.unwrap_or(DEFAULT_RATERS),
            rater_sd: args.rater_sd.unwrap_or(DEFAULT_RATER_SD),
        },
    };
    let defaults = GenConfig::default();
    let seed = args.seed.unwrap_or(defaults.seed);
    let generator = GenConfig {
        num_systems: args.num_systems.unwrap_or(defaults.num_systems),
        samples_per_system: args
            .samples_per_system
            .unwrap_or(defaults.samples_per_system),
        feature_dim: args.feature_dim.unwrap_or(defaults.feature_dim),
        noise_model,
        seed,
        draw_stream: args.draw_stream.unwrap_or(defaults.draw_stream),
        clip_labels: args.clip_labels.unwrap_or(defaults.clip_labels),
    };
    let split = match args.split.as_deref() {
        None => None,
        Some(&[a, b, c]) => Some([a, b, c]),
        Some(other) => {
            return Err(UsageError(format!(
                "--split needs three fractions, got {}",
                other.len()
            ))
            .into())
        }
    };
    if args.noise_level.is_some() && args.waveform_noise.is_some() {
        return Err(
            UsageError("--noise-level and --waveform-noise are mutually exclusive".into()).into(),
        );
    }
    let noise_level = args
        .noise_level
        .or(args.waveform_noise.map(datagen::waveform_noise_analogue));
    let noise_seed = args.noise_seed.unwrap_or(seed);
    let split_seed = args.split_seed.unwrap_or(seed);

    let mut ds = match args.ood_shift {
        Some(shift) => gen_ood_shift(&generator, shift)?,
        None => gen_synthetic(&generator)?,
    };
    if let Some(level) = noise_level {
        ds = add_feature_noise(&ds, level, noise_seed)?;
    }

    let dir = parent_dir(&out);
    ensure_dir(&dir)?;
    let stem = file_stem(&out);
    let outputs = match split {
        None => {
            ds.write_csv(&out)?;
            vec![out.clone()]
        }
        Some(fractions) => {
            let (tr, va, te) = ds.split(fractions, split_seed)?;
            let mut paths = Vec::new();
            for (part, name) in [(tr, "train"), (va, "val"), (te, "test")] {
                let path = dir.join(format!("{stem}_{name}.csv"));
                part.write_csv(&path)?;
                log::info!("wrote {} samples to {}", part.len(), path.display());
                paths.push(path);
            }
            paths
        }
    };
    let resolved = GenDataResolved {
        generator,
        ood_shift: args.ood_shift,
        waveform_noise: args.waveform_noise,
        noise_level,
        noise_seed,
        split,
        split_seed,
        outputs,
    };
    write_json(&dir.join(format!("{stem}.gen-data.json")), &resolved)
}

#[derive(Debug, Serialize)]
struct TrainResolved {
    preset: Option<RunPreset>,
    train: PathBuf,
    val: Option<PathBuf>,
    out_dir: PathBuf,
    arch: ArchConfig,
    training: TrainConfig,
}

pub fn train_cmd(args: TrainArgs) -> Result<()> {
    let train_path = require(args.train.clone(), "train")?;
    let out_dir = require(args.out_dir.clone(), "out-dir")?;
    let paper = args.preset == Some(RunPreset::Paper);
    let train_set = Dataset::read_csv(&train_path)?;
    let val_set = args.val.as_deref().map(Dataset::read_csv).transpose()?;
    let input_dim = train_set
        .feature_dim()
        .ok_or_else(|| mosuq::Error::Input(format!("{} has no samples", train_path.display())))?;

    let arch_defaults = ArchConfig::default();
    let arch = ArchConfig {
        input_dim,
        trunk_dims: args.trunk_dims.clone().unwrap_or(arch_defaults.trunk_dims),
        head_hidden_dim: args
            .head_hidden_dim
            .unwrap_or(arch_defaults.head_hidden_dim),
        dropout_p: args
            .dropout_p
            .or(paper.then_some(PAPER_DROPOUT))
            .unwrap_or(arch_defaults.dropout_p),
        activation: args.activation.unwrap_or(arch_defaults.activation),
    };
    let cfg_defaults = TrainConfig::default();
    let training = TrainConfig {
        epochs: args.epochs.unwrap_or(cfg_defaults.epochs),
        batch_size: args
            .batch_size
            .or(paper.then_some(PAPER_BATCH))
            .unwrap_or(cfg_defaults.batch_size),
        learning_rate: args
            .learning_rate
            .or(paper.then_some(PAPER_LR))
            .unwrap_or(cfg_defaults.learning_rate),
        loss: args.loss.unwrap_or(cfg_defaults.loss),
        seed: args.seed.unwrap_or(cfg_defaults.seed),
        optimizer: args.optimizer.unwrap_or(cfg_defaults.optimizer),
    };

    ensure_dir(&out_dir)?;
    let resolved = TrainResolved {
        preset: args.preset,
        train: train_path,
        val: args.val,
        out_dir: out_dir.clone(),
        arch: arch.clone(),
        training: training.clone(),
    };
    write_json(&out_dir.join("train.config.json"), &resolved)?;

    let (params, history) = train(&train_set, val_set.as_ref(), &arch, &training)?;
    if let Some(last) = history.train_loss.last() {
        log::info!("final training loss {last:.6}");
    }
    save_checkpoint(
        &Checkpoint::uncalibrated(params),
        &out_dir.join("checkpoint.json"),
    )?;
    history.write_csv(&out_dir.join("history.csv"))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CalibrateResolved {
    checkpoint: PathBuf,
    data: PathBuf,
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct CalibrationSummary {
    /// Scale fitted on the predictions as they were before this run
    /// (already scaled if the input checkpoint was calibrated).
    r_fit: f64,
    /// Composite scale stored in the output checkpoint.
    calibration_r: f64,
    previous_calibration_r: Option<f64>,
    num_samples_used: usize,
    mean_normalized_residual_sq: f64,
    warning: Option<String>,
}

pub fn calibrate_cmd(args: CalibrateArgs) -> Result<()> {
    let ckpt_path = require(args.checkpoint.clone(), "checkpoint")?;
    let data_path = require(args.data.clone(), "data")?;
    let out = args.out.clone().unwrap_or_else(|| ckpt_path.clone());
    let mut ckpt = load_checkpoint(&ckpt_path)?;
    let data = Dataset::read_csv(&data_path)?;
    let previous = ckpt.calibration_r.map(CalibrationScale::from_r);

    let mut preds = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for s in &data.samples {
        let p = predict(&ckpt.params, &s.features)?;
        preds.push(previous.as_ref().map_or(p, |sc| apply_scale(&p, sc)));
        labels.push(s.y);
    }
    let fit = fit_scale(&preds, &labels)?;
    let total = previous.as_ref().map_or(fit.r, |sc| sc.r * fit.r);
    log::info!("fitted r = {} (stored {total})", fit.r);
    ckpt.calibration_r = Some(total);

    let dir = parent_dir(&out);
    ensure_dir(&dir)?;
    save_checkpoint(&ckpt, &out)?;
    let summary = CalibrationSummary {
        r_fit: fit.r,
        calibration_r: total,
        previous_calibration_r: previous.map(|s| s.r),
        num_samples_used: fit.num_samples_used,
        mean_normalized_residual_sq: fit.mean_normalized_residual_sq,
        warning: fit.warning,
    };
    write_json(&dir.join("calibration.json"), &summary)?;
    write_json(
        &dir.join("calibrate.config.json"),
        &CalibrateResolved {
            checkpoint: ckpt_path,
            data: data_path,
            out,
        },
    )
}

fn mc_config(
    passes: Option<usize>,
    dropout_p: Option<f64>,
    seed: Option<u64>,
    paper: bool,
    ckpt: &Checkpoint,
) -> MCConfig {
    MCConfig {
        passes: passes
            .or(paper.then_some(PAPER_MC_PASSES))
            .unwrap_or(MCConfig::default().passes),
        dropout_p: dropout_p
            .or(paper.then_some(PAPER_DROPOUT))
            .unwrap_or(ckpt.params.arch.dropout_p),
        seed: seed.unwrap_or(0),
    }
}

#[derive(Debug, Serialize)]
struct EvaluateResolved {
    preset: Option<RunPreset>,
    checkpoint: PathBuf,
    data: PathBuf,
    out_dir: PathBuf,
    report: PathBuf,
    calibration_r: Option<f64>,
    mc: Option<MCConfig>,
    bins: usize,
    curve_bins: usize,
    thresholds: usize,
    uncertainty: UncertaintyKind,
    point: PointKind,
}

pub fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let ckpt_path = require(args.checkpoint.clone(), "checkpoint")?;
    let data_path = require(args.data.clone(), "data")?;
    let out_dir = require(args.out_dir.clone(), "out-dir")?;
    let paper = args.preset == Some(RunPreset::Paper);
    let ckpt = load_checkpoint(&ckpt_path)?;
    let data = Dataset::read_csv(&data_path)?;

    let uncertainty = args.uncertainty.unwrap_or(UncertaintyKind::Aleatoric);
    let point = args.point.unwrap_or_default();
    let needs_mc = uncertainty != UncertaintyKind::Aleatoric || point == PointKind::McMean;
    let use_mc = args.mc.or(paper.then_some(true)).unwrap_or(false) || needs_mc;
    let mc = use_mc.then(|| {
        mc_config(
            args.mc_passes,
            args.mc_dropout_p,
            args.mc_seed,
            paper,
            &ckpt,
        )
    });
    let bins = args
        .bins
        .or(paper.then_some(PAPER_BINS))
        .unwrap_or(PAPER_BINS);
    let curve_bins = args
        .curve_bins
        .unwrap_or(DEFAULT_CURVE_BINS)
        .min(data.len().max(1));
    let thresholds = args.thresholds.unwrap_or(DEFAULT_THRESHOLDS);
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| out_dir.join("report.json"));

    ensure_dir(&out_dir)?;
    ensure_dir(&parent_dir(&report_path))?;
    let resolved = EvaluateResolved {
        preset: args.preset,
        checkpoint: ckpt_path,
        data: data_path,
        out_dir: out_dir.clone(),
        report: report_path.clone(),
        calibration_r: ckpt.calibration_r,
        mc,
        bins,
        curve_bins,
        thresholds,
        uncertainty,
        point,
    };
    write_json(&out_dir.join("evaluate.config.json"), &resolved)?;

    let scale = ckpt.calibration_r.map(CalibrationScale::from_r);
    let scores = score_dataset(&ckpt.params, scale.as_ref(), &data, mc.as_ref())?;
    let records = to_records(&scores, uncertainty, point)?;
    let report = metrics::report(&records, bins)?;
    write_json(&report_path, &report)?;

    let curve = error_uncertainty_curve(&records, curve_bins)?;
    write_atomic(
        &out_dir.join("error_uncertainty.csv"),
        curve_csv(&curve).as_bytes(),
    )?;
    let sweep = selective_sweep(&records, &quantile_thresholds(&records, thresholds))?;
    write_atomic(
        &out_dir.join("selective.csv"),
        selective_csv(&sweep).as_bytes(),
    )?;
    if mc.is_some() {
        write_atomic(&out_dir.join("mc.csv"), mc_csv(&scores)?.as_bytes())?;
    }
    log::info!(
        "mse {:.4} srcc {:.4} nll {:.4} uce {:.4} sharpness {:.4}",
        report.mse,
        report.srcc_system,
        report.nll,
        report.uce,
        report.sharpness
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct OodResolved {
    preset: Option<RunPreset>,
    checkpoint: PathBuf,
    in_domain: PathBuf,
    ood: PathBuf,
    out_dir: PathBuf,
    calibration_r: Option<f64>,
    mc: MCConfig,
    uncertainty: UncertaintyKind,
}

pub fn ood_detect_cmd(args: OodDetectArgs) -> Result<()> {
    let ckpt_path = require(args.checkpoint.clone(), "checkpoint")?;
    let in_path = require(args.in_domain.clone(), "in-domain")?;
    let ood_path = require(args.ood.clone(), "ood")?;
    let out_dir = require(args.out_dir.clone(), "out-dir")?;
    let paper = args.preset == Some(RunPreset::Paper);
    let ckpt = load_checkpoint(&ckpt_path)?;
    let in_domain = Dataset::read_csv(&in_path)?;
    let ood = Dataset::read_csv(&ood_path)?;
    let mc = mc_config(
        args.mc_passes,
        args.mc_dropout_p,
        args.mc_seed,
        paper,
        &ckpt,
    );
    let uncertainty = args.uncertainty.unwrap_or(UncertaintyKind::EpiDist);

    ensure_dir(&out_dir)?;
    let resolved = OodResolved {
        preset: args.preset,
        checkpoint: ckpt_path,
        in_domain: in_path,
        ood: ood_path,
        out_dir: out_dir.clone(),
        calibration_r: ckpt.calibration_r,
        mc,
        uncertainty,
    };
    write_json(&out_dir.join("ood-detect.config.json"), &resolved)?;

    let scale = ckpt.calibration_r.map(CalibrationScale::from_r);
    let (report, rows) = ood_detect(
        &ckpt.params,
        scale.as_ref(),
        &in_domain,
        &ood,
        &mc,
        uncertainty,
    )?;
    write_json(&out_dir.join("ood_report.json"), &report)?;
    write_atomic(
        &out_dir.join("ood_scores.csv"),
        ood_scores_csv(&rows).as_bytes(),
    )?;
    log::info!(
        "{} AUC {:.4}",
        serde_json::to_string(&uncertainty)?,
        report.auc
    );
    Ok(())
}
