//! Versioned JSON checkpoints holding configuration and every weight tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::ContrastScorer;
use crate::encoder::{MicroEncoder, Vocab};
use crate::error::{EtaError, Result};
use crate::eta::{CpHead, GroundingHead};
use crate::pipeline::{ContrastModel, EtaModel, PipelineConfig};
use crate::tape::Mat;

/// Format version; loads accept any minor version of the same major.
pub const FORMAT_VERSION: &str = "1.0";

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    rows: usize,
    cols: usize,
    /// Row-major values.
    data: Vec<f64>,
}

impl StoredTensor {
    fn from_mat(name: &str, m: &Mat) -> Self {
        Self {
            name: name.to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.iter().copied().collect(),
        }
    }

    fn into_pair(self) -> Result<(String, Mat)> {
        let m = Mat::from_shape_vec((self.rows, self.cols), self.data)
            .map_err(|e| EtaError::Validation(format!("tensor `{}`: {e}", self.name)))?;
        Ok((self.name, m))
    }
}

#[derive(Serialize, Deserialize)]
struct StoredContrast {
    tensors: Vec<StoredTensor>,
    scorer: ContrastScorer,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    version: String,
    config: PipelineConfig,
    vocab: Vec<String>,
    encoder: Vec<StoredTensor>,
    cp_head: CpHead,
    grounding_head: GroundingHead,
    #[serde(default)]
    contrast: Option<StoredContrast>,
}

fn tensors(enc: &MicroEncoder) -> Vec<StoredTensor> {
    enc.tensors().map(|(n, m)| StoredTensor::from_mat(n, m)).collect()
}

fn rebuild(config: &PipelineConfig, vocab: &Vocab, stored: Vec<StoredTensor>) -> Result<MicroEncoder> {
    let pairs = stored
        .into_iter()
        .map(StoredTensor::into_pair)
        .collect::<Result<Vec<_>>>()?;
    MicroEncoder::from_tensors(config.encoder.clone(), vocab.clone(), pairs)
}

pub fn to_json(model: &EtaModel) -> Result<String> {
    let stored = Stored {
        version: FORMAT_VERSION.to_string(),
        config: model.config.clone(),
        vocab: model.encoder.vocab().tokens().to_vec(),
        encoder: tensors(&model.encoder),
        cp_head: model.cp.clone(),
        grounding_head: model.grounding.clone(),
        contrast: model.contrast.as_ref().map(|c| StoredContrast {
            tensors: tensors(&c.encoder),
            scorer: c.scorer.clone(),
        }),
    };
    Ok(serde_json::to_string(&stored)?)
}

fn major(v: &str) -> &str {
    v.split('.').next().unwrap_or(v)
}

pub fn from_json(text: &str, label: &str) -> Result<EtaModel> {
    let stored: Stored = serde_json::from_str(text).map_err(|e| EtaError::Parse {
        path: label.to_string(),
        line: e.line(),
        field: "checkpoint".into(),
        message: e.to_string(),
    })?;
    if major(&stored.version) != major(FORMAT_VERSION) {
        return Err(EtaError::Mismatch(format!(
            "checkpoint version {} is incompatible with {FORMAT_VERSION}",
            stored.version
        )));
    }
    let vocab = Vocab::from_tokens(stored.vocab)?;
    let encoder = rebuild(&stored.config, &vocab, stored.encoder)?;
    let d = encoder.config().d;
    if stored.cp_head.d() != d || stored.grounding_head.d() != d {
        return Err(EtaError::Shape(format!("head widths do not match encoder width {d}")));
    }
    let contrast = stored
        .contrast
        .map(|c| {
            Ok::<_, EtaError>(ContrastModel {
                encoder: rebuild(&stored.config, &vocab, c.tensors)?,
                scorer: c.scorer,
            })
        })
        .transpose()?;
    Ok(EtaModel {
        config: stored.config,
        encoder,
        cp: stored.cp_head,
        grounding: stored.grounding_head,
        contrast,
    })
}

pub fn save(model: &EtaModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_json(model)?).map_err(|e| EtaError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<EtaModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => EtaError::MissingArtifact(format!("checkpoint {}", path.display())),
        _ => EtaError::io(path, e),
    })?;
    from_json(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_major_is_checked() {
        assert_eq!(major("1.7"), "1");
        assert!(from_json(r#"{"version":"2.0"}"#, "x").is_err());
    }
}
