//! JSON checkpoint: `{format_version, arch, weights, biases, rng_seed_used,
//! calibration_r?}`. Weights are row-major nested arrays grouped by trunk and
//! head; serialization is canonical so save -> load -> save is byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::net::{ArchConfig, Dense, Head, Layers, ModelParams};

pub const FORMAT_VERSION: u32 = 1;

/// Trained parameters plus the optional aleatoric scale `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub calibration_r: Option<f64>,
}

impl Checkpoint {
    pub fn uncalibrated(params: ModelParams) -> Self {
        Self {
            params,
            calibration_r: None,
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Grouped<T> {
    trunk: Vec<T>,
    score_head: Vec<T>,
    logvar_head: Vec<T>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    arch: ArchConfig,
    #[serde(default)]
    weights: Grouped<Vec<Vec<f64>>>,
    #[serde(default)]
    biases: Grouped<Vec<f64>>,
    rng_seed_used: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    calibration_r: Option<f64>,
}

fn matrix(d: &Dense) -> Vec<Vec<f64>> {
    d.weights
        .chunks(d.cols.max(1))
        .map(<[f64]>::to_vec)
        .collect()
}

fn dense_from(
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    rows: usize,
    cols: usize,
    what: &str,
) -> Result<Dense> {
    if w.len() != rows || w.iter().any(|r| r.len() != cols) || b.len() != rows {
        return Err(Error::Checkpoint(format!(
            "{what}: expected {rows}x{cols} weights and {rows} biases"
        )));
    }
    Ok(Dense {
        rows,
        cols,
        weights: w.into_iter().flatten().collect(),
        bias: b,
    })
}

fn head_from(w: Vec<Vec<Vec<f64>>>, b: Vec<Vec<f64>>, template: &Head, what: &str) -> Result<Head> {
    if w.len() != 2 || b.len() != 2 {
        return Err(Error::Checkpoint(format!("{what}: expected two layers")));
    }
    let mut w = w.into_iter();
    let mut b = b.into_iter();
    let hidden = dense_from(
        w.next().unwrap(),
        b.next().unwrap(),
        template.hidden.rows,
        template.hidden.cols,
        what,
    )?;
    let output = dense_from(
        w.next().unwrap(),
        b.next().unwrap(),
        template.output.rows,
        template.output.cols,
        what,
    )?;
    Ok(Head { hidden, output })
}

impl CheckpointFile {
    fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        let l = &ckpt.params.layers;
        let head_w = |h: &Head| vec![matrix(&h.hidden), matrix(&h.output)];
        let head_b = |h: &Head| vec![h.hidden.bias.clone(), h.output.bias.clone()];
        Self {
            format_version: FORMAT_VERSION,
            arch: ckpt.params.arch.clone(),
            weights: Grouped {
                trunk: l.trunk.iter().map(matrix).collect(),
                score_head: head_w(&l.score_head),
                logvar_head: head_w(&l.logvar_head),
            },
            biases: Grouped {
                trunk: l.trunk.iter().map(|d| d.bias.clone()).collect(),
                score_head: head_b(&l.score_head),
                logvar_head: head_b(&l.logvar_head),
            },
            rng_seed_used: ckpt.params.rng_seed_used,
            calibration_r: ckpt.calibration_r,
        }
    }

    fn into_checkpoint(self) -> Result<Checkpoint> {
        self.arch
            .validate()
            .map_err(|e| Error::Checkpoint(format!("arch: {e}")))?;
        if self.weights.trunk.is_empty()
            && self.weights.score_head.is_empty()
            && self.weights.logvar_head.is_empty()
        {
            return Err(Error::Checkpoint(
                "checkpoint holds no trained weights".into(),
            ));
        }
        let template = Layers::zeros(&self.arch);
        if self.weights.trunk.len() != template.trunk.len()
            || self.biases.trunk.len() != template.trunk.len()
        {
            return Err(Error::Checkpoint(format!(
                "expected {} trunk layers",
                template.trunk.len()
            )));
        }
        let trunk = self
            .weights
            .trunk
            .into_iter()
            .zip(self.biases.trunk)
            .zip(&template.trunk)
            .enumerate()
            .map(|(i, ((w, b), t))| dense_from(w, b, t.rows, t.cols, &format!("trunk layer {i}")))
            .collect::<Result<Vec<_>>>()?;
        let layers = Layers {
            trunk,
            score_head: head_from(
                self.weights.score_head,
                self.biases.score_head,
                &template.score_head,
                "score head",
            )?,
            logvar_head: head_from(
                self.weights.logvar_head,
                self.biases.logvar_head,
                &template.logvar_head,
                "logvar head",
            )?,
        };
        let params = ModelParams {
            arch: self.arch,
            layers,
            rng_seed_used: self.rng_seed_used,
        };
        params
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(r) = self.calibration_r {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "calibration_r must be positive, got {r}"
                )));
            }
        }
        Ok(Checkpoint {
            params,
            calibration_r: self.calibration_r,
        })
    }
}

pub fn to_json(ckpt: &Checkpoint) -> Result<String> {
    let mut text = serde_json::to_string_pretty(&CheckpointFile::from_checkpoint(ckpt))?;
    text.push('\n');
    Ok(text)
}

fn parse_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

pub fn from_json(text: &str, path: &Path) -> Result<Checkpoint> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_error(path, e))?;
    match value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
    {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(Error::Version {
                found: u32::try_from(v).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(Error::Checkpoint("missing format_version".into())),
    }
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| parse_error(path, e))?;
    file.into_checkpoint()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, to_json(ckpt)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;

    fn ckpt() -> Checkpoint {
        Checkpoint {
            params: init_params(&ArchConfig::default(), 4).unwrap(),
            calibration_r: Some(1.25),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        let original = ckpt();
        save_checkpoint(&original, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, original);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn uncalibrated_omits_field() {
        let text = to_json(&Checkpoint::uncalibrated(ckpt().params)).unwrap();
        assert!(!text.contains("calibration_r"));
        let back = from_json(&text, Path::new("x")).unwrap();
        assert_eq!(back.calibration_r, None);
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let text = to_json(&ckpt()).unwrap();
        let cut = &text[..text.len() / 2];
        assert!(
            matches!(from_json(cut, Path::new("x")), Err(Error::Parse { line, .. }) if line > 1)
        );
    }

    #[test]
    fn wrong_version_is_version_error() {
        let text = to_json(&ckpt())
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(
            from_json(&text, Path::new("x")),
            Err(Error::Version {
                found: 2,
                expected: 1
            })
        ));
    }

    #[test]
    fn missing_weights_is_checkpoint_error() {
        let mut v: serde_json::Value = serde_json::from_str(&to_json(&ckpt()).unwrap()).unwrap();
        let obj = v.as_object_mut().unwrap();
        obj.remove("weights");
        obj.remove("biases");
        let err = from_json(&v.to_string(), Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("no trained weights")));
    }

    #[test]
    fn wrong_shape_is_checkpoint_error() {
        let mut v: serde_json::Value = serde_json::from_str(&to_json(&ckpt()).unwrap()).unwrap();
        v["arch"]["head_hidden_dim"] = 7.into();
        assert!(matches!(
            from_json(&v.to_string(), Path::new("x")),
            Err(Error::Checkpoint(_))
        ));
    }
}
