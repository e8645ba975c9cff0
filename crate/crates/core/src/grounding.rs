//! Turning latent grounding into discrete pairs and downstream exports.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ConceptSet;
use crate::encoder::Encoding;
use crate::error::{EtaError, Result};
use crate::eta::{ConfidenceVector, LatentGrounding};
use crate::tape::Mat;

/// Default `τ` for schema linking.
pub const SCHEMA_TAU: f64 = 0.2;
/// Default `τ` for entity linking.
pub const ENTITY_TAU: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingPair {
    #[serde(rename = "token")]
    pub token_index: usize,
    #[serde(rename = "concept")]
    pub concept_id: String,
    pub score: f64,
}

/// Which entries the per-token argmax looks at.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgmaxScope {
    /// Argmax over the whole row, keep-status checked afterwards.
    #[default]
    FullRow,
    /// Argmax over the entries that survived the threshold only.
    KeptOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairConfig {
    pub tau: f64,
    pub p_gate: f64,
    pub argmax_scope: ArgmaxScope,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            tau: SCHEMA_TAU,
            p_gate: 0.5,
            argmax_scope: ArgmaxScope::FullRow,
        }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(EtaError::config(
                "pairs.tau",
                format!("must lie in (0, 1], got {}", self.tau),
            ));
        }
        if !self.p_gate.is_finite() {
            return Err(EtaError::config("pairs.p_gate", "must be finite"));
        }
        Ok(())
    }
}

/// Threshold each column at `τ/|c_k|`, keep each token's row maximum
/// (lowest concept index on ties), then gate on `p_k >= p_gate`.
pub fn produce_pairs(alpha: &Mat, p: &ConfidenceVector, concepts: &ConceptSet, cfg: &PairConfig) -> Vec<GroundingPair> {
    let (n, k) = alpha.dim();
    assert_eq!(k, concepts.len(), "alpha columns vs concepts");
    assert_eq!(k, p.len(), "alpha columns vs confidences");
    let kept = |row: usize, col: usize| alpha[[row, col]] > cfg.tau / concepts[col].width() as f64;
    let mut pairs = Vec::new();
    for row in 0..n {
        let mut best: Option<usize> = None;
        for col in 0..k {
            if cfg.argmax_scope == ArgmaxScope::KeptOnly && !kept(row, col) {
                continue;
            }
            if best.is_none_or(|b| alpha[[row, col]] > alpha[[row, b]]) {
                best = Some(col);
            }
        }
        let Some(col) = best else { continue };
        if kept(row, col) && p.0[col] >= cfg.p_gate {
            pairs.push(GroundingPair {
                token_index: row,
                concept_id: concepts[col].id.clone(),
                score: alpha[[row, col]],
            });
        }
    }
    pairs
}

/// Convenience wrapper taking a [`LatentGrounding`].
pub fn produce_pairs_from(
    alpha: &LatentGrounding,
    p: &ConfidenceVector,
    concepts: &ConceptSet,
    cfg: &PairConfig,
) -> Vec<GroundingPair> {
    produce_pairs(alpha.matrix(), p, concepts, cfg)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpanLink {
    pub concept: String,
    pub start: usize,
    pub end: usize,
}

/// Merges runs of consecutive tokens sharing a concept into `[start, end)` spans.
pub fn merge_spans(pairs: &[GroundingPair]) -> Vec<SpanLink> {
    let mut sorted: Vec<(&str, usize)> = pairs.iter().map(|p| (p.concept_id.as_str(), p.token_index)).collect();
    sorted.sort_unstable();
    sorted.dedup();
    let mut spans: Vec<SpanLink> = Vec::new();
    for (concept, tok) in sorted {
        match spans.last_mut() {
            Some(last) if last.concept == concept && last.end == tok => last.end = tok + 1,
            _ => spans.push(SpanLink {
                concept: concept.to_string(),
                start: tok,
                end: tok + 1,
            }),
        }
    }
    spans.sort_by(|a, b| (a.start, &a.concept).cmp(&(b.start, &b.concept)));
    spans
}

/// How the token and its grounded concept context are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `q_n ⊕ Σ_k α[n][k] e_k`, width `2d`.
    #[default]
    Concat,
    /// `q_n + Σ_k α[n][k] e_k`, width `d`.
    Add,
}

/// Schema-aware token representations.
pub fn fuse(enc: &Encoding, alpha: &Mat, mode: FusionMode) -> Result<Mat> {
    if alpha.dim() != (enc.n(), enc.k()) {
        return Err(EtaError::Shape(format!(
            "alpha {:?} vs encoding ({}, {})",
            alpha.dim(),
            enc.n(),
            enc.k()
        )));
    }
    let context = alpha.dot(&enc.concept_reps);
    Ok(match mode {
        FusionMode::Concat => {
            ndarray::concatenate(ndarray::Axis(1), &[enc.token_reps.view(), context.view()]).expect("row counts match")
        }
        FusionMode::Add => &enc.token_reps + &context,
    })
}

/// `N×K` 0/1 matrix with a 1 at every emitted pair.
pub fn export_one_hot(pairs: &[GroundingPair], concepts: &ConceptSet, n: usize) -> Result<Vec<Vec<u8>>> {
    let mut m = vec![vec![0u8; concepts.len()]; n];
    for p in pairs {
        let k = concepts
            .index_of(&p.concept_id)
            .ok_or_else(|| EtaError::Validation(format!("pair concept `{}` not in concept set", p.concept_id)))?;
        if p.token_index >= n {
            return Err(EtaError::Validation(format!(
                "pair token {} out of range for {n} tokens",
                p.token_index
            )));
        }
        m[p.token_index][k] = 1;
    }
    Ok(m)
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub pairs: Vec<GroundingPair>,
    #[serde(default)]
    pub spans: Vec<SpanLink>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub one_hot: Option<Vec<Vec<u8>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concepts: Option<Vec<String>>,
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>, pairs: Vec<GroundingPair>) -> Self {
        Self {
            id: id.into(),
            system: None,
            pairs,
            spans: Vec::new(),
            alpha: None,
            one_hot: None,
            fused: None,
            question_tokens: None,
            concepts: None,
        }
    }
}

pub fn matrix_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn write_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| EtaError::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| EtaError::io(path, e))?;
    }
    f.flush().map_err(|e| EtaError::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| EtaError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| EtaError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| EtaError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            field: "record".into(),
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
