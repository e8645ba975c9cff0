//! Erasing-then-awakening.
//!
//! 1. A concept-prediction (CP) head learns `p_k = sigmoid(w · e_k)` from
//!    weak occurrence labels.
//! 2. Erasing each question word in turn and re-running the CP path gives
//!    the pseudo alignment `Δ[n][k] = l_k · max(0, p_k - p̂[n][k])`.
//! 3. A bilinear grounding head is trained so that its column-softmaxed
//!    scores `α` maximize the `Δ`-weighted log-likelihood.
//!
//! Training entry points take [`WeakView`]s only.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Question, WeakView};
use crate::encoder::{ContextEncoder, Encoding, MicroEncoder};
use crate::error::{EtaError, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::par::{self, Execution};
use crate::tape::{self, Mat, Tape};

/// Floor applied to `α` before taking its logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Concept-prediction classifier `W_l` (`1×d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpHead {
    pub w: Mat,
}

impl CpHead {
    pub fn zeros(d: usize) -> Self {
        Self { w: Mat::zeros((1, d)) }
    }

    pub fn random(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 0.02).unwrap();
        Self {
            w: Mat::from_shape_fn((1, d), |_| dist.sample(&mut rng)),
        }
    }

    pub fn d(&self) -> usize {
        self.w.ncols()
    }
}

/// Bilinear grounding head (`W_e`, `W_q`, both `d×d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingHead {
    pub we: Mat,
    pub wq: Mat,
}

impl GroundingHead {
    pub fn identity(d: usize) -> Self {
        Self {
            we: Mat::eye(d),
            wq: Mat::eye(d),
        }
    }

    pub fn random(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
        Self {
            we: Mat::from_shape_fn((d, d), |_| dist.sample(&mut rng)),
            wq: Mat::from_shape_fn((d, d), |_| dist.sample(&mut rng)),
        }
    }

    pub fn d(&self) -> usize {
        self.we.nrows()
    }
}

/// Per-concept mention probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceVector(pub Vec<f64>);

impl ConfidenceVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `p_k >= threshold` per concept.
    pub fn mentioned(&self, threshold: f64) -> Vec<bool> {
        self.0.iter().map(|p| *p >= threshold).collect()
    }
}

/// The `N×K` erasure-drop matrix `Δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoAlignment(Mat);

impl PseudoAlignment {
    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    /// Wraps a matrix after checking entries lie in `[0, 1]`.
    pub fn from_matrix(m: Mat) -> Result<Self> {
        if m.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(EtaError::Validation(
                "pseudo alignment entries must lie in [0, 1]".into(),
            ));
        }
        Ok(Self(m))
    }
}

/// The `N×K` column-stochastic latent grounding `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrounding(Mat);

impl LatentGrounding {
    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    pub fn into_matrix(self) -> Mat {
        self.0
    }
}

pub fn predict_concepts(enc: &Encoding, head: &CpHead) -> Result<ConfidenceVector> {
    if enc.d() != head.d() {
        return Err(EtaError::Shape(format!(
            "encoding width {} != CP head width {}",
            enc.d(),
            head.d()
        )));
    }
    let logits = enc.concept_reps.dot(&head.w.row(0));
    Ok(ConfidenceVector(logits.iter().map(|z| tape::sigmoid(*z)).collect()))
}

/// `Δ[n][k] = l_k · max(0, p_k - p̂[n][k])`
pub fn pseudo_alignment(p: &ConfidenceVector, erased: &Mat, labels: &[bool]) -> Result<PseudoAlignment> {
    let k = p.len();
    if erased.ncols() != k || labels.len() != k {
        return Err(EtaError::Shape(format!(
            "confidences {k}, erased columns {}, labels {}",
            erased.ncols(),
            labels.len()
        )));
    }
    let mut delta = Mat::zeros(erased.dim());
    for ((n, kk), d) in delta.indexed_iter_mut() {
        if labels[kk] {
            *d = (p.0[kk] - erased[[n, kk]]).max(0.0);
        }
    }
    Ok(PseudoAlignment(delta))
}

/// Everything produced by one erasure sweep over a question.
#[derive(Debug, Clone)]
pub struct Erasure {
    /// Encoding of the unerased input.
    pub encoding: Encoding,
    pub confidences: ConfidenceVector,
    /// `p̂`, one row per erased word.
    pub erased: Mat,
    pub delta: PseudoAlignment,
}

/// Runs the clean pass and the `N` erased passes; `labels` gate `Δ`.
pub fn erase(
    q: &dyn Question,
    labels: &[bool],
    encoder: &dyn ContextEncoder,
    head: &CpHead,
    exec: Execution,
) -> Result<Erasure> {
    let n = q.question_tokens().len();
    let encoding = encoder.encode(q, None)?;
    let confidences = predict_concepts(&encoding, head)?;
    let rows = par::map_range(exec, n, |i| {
        encoder.encode(q, Some(i)).and_then(|e| predict_concepts(&e, head))
    });
    let mut erased = Mat::zeros((n, confidences.len()));
    for (i, row) in rows.into_iter().enumerate() {
        for (k, v) in row?.0.into_iter().enumerate() {
            erased[[i, k]] = v;
        }
    }
    let delta = pseudo_alignment(&confidences, &erased, labels)?;
    Ok(Erasure {
        encoding,
        confidences,
        erased,
        delta,
    })
}

pub fn erase_and_score(
    view: &WeakView<'_>,
    encoder: &dyn ContextEncoder,
    head: &CpHead,
    exec: Execution,
) -> Result<PseudoAlignment> {
    Ok(erase(view, view.weak_labels, encoder, head, exec)?.delta)
}

fn check_head(enc: &Encoding, head: &GroundingHead) -> Result<()> {
    let d = enc.d();
    if head.we.dim() != (d, d) || head.wq.dim() != (d, d) {
        return Err(EtaError::Shape(format!(
            "grounding head {:?}/{:?} does not match width {d}",
            head.we.dim(),
            head.wq.dim()
        )));
    }
    Ok(())
}

/// `g[n][k] = (W_e e_k) · (W_q q_n) / sqrt(d)`
pub fn grounding_scores(enc: &Encoding, head: &GroundingHead) -> Result<Mat> {
    check_head(enc, head)?;
    let a = enc.token_reps.dot(&head.wq.t());
    let b = enc.concept_reps.dot(&head.we.t());
    Ok(a.dot(&b.t()) / (enc.d() as f64).sqrt())
}

/// Column-wise softmax over the token axis.
pub fn normalize(g: &Mat) -> LatentGrounding {
    LatentGrounding(tape::softmax_cols(g))
}

/// `-Σ_n Σ_k Δ[n][k] · ln(max(α[n][k], 1e-12))`
pub fn awakening_loss(alpha: &LatentGrounding, delta: &PseudoAlignment) -> Result<f64> {
    if alpha.0.dim() != delta.0.dim() {
        return Err(EtaError::Shape(format!(
            "alpha {:?} vs delta {:?}",
            alpha.0.dim(),
            delta.0.dim()
        )));
    }
    Ok(alpha
        .0
        .iter()
        .zip(delta.0.iter())
        .map(|(a, d)| -d * a.max(LOG_FLOOR).ln())
        .sum())
}

/// Loss and analytic gradients with respect to `W_e` and `W_q`.
#[derive(Debug, Clone)]
pub struct AwakeningGradients {
    pub loss: f64,
    pub we: Mat,
    pub wq: Mat,
}

pub fn awakening_gradients(
    enc: &Encoding,
    head: &GroundingHead,
    delta: &PseudoAlignment,
) -> Result<AwakeningGradients> {
    check_head(enc, head)?;
    let sqrt_d = (enc.d() as f64).sqrt();
    let a = enc.token_reps.dot(&head.wq.t());
    let b = enc.concept_reps.dot(&head.we.t());
    let alpha = normalize(&(a.dot(&b.t()) / sqrt_d));
    let loss = awakening_loss(&alpha, delta)?;
    let al = &alpha.0;
    // w = -(dL/dα)·α, zero where the floor is active
    let mut w = delta.0.clone();
    ndarray::Zip::from(&mut w).and(al).for_each(|w, &a| {
        if a <= LOG_FLOOR {
            *w = 0.0;
        }
    });
    let col_sums = w.sum_axis(Axis(0));
    let mut dg = al * &col_sums.insert_axis(Axis(0));
    dg -= &w;
    let da = dg.dot(&b) / sqrt_d;
    let db = dg.t().dot(&a) / sqrt_d;
    Ok(AwakeningGradients {
        loss,
        wq: da.t().dot(&enc.token_reps),
        we: db.t().dot(&enc.concept_reps),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaNorm {
    Raw,
    Softmax,
    Sum,
}

/// Uses `Δ` itself as the grounding prediction.
pub fn delta_as_prediction(delta: &PseudoAlignment, mode: DeltaNorm) -> Mat {
    match mode {
        DeltaNorm::Raw => delta.0.clone(),
        DeltaNorm::Softmax => tape::softmax_cols(&delta.0),
        DeltaNorm::Sum => {
            let mut m = delta.0.clone();
            for mut col in m.columns_mut() {
                let s = col.sum();
                if s > 0.0 {
                    col /= s;
                }
            }
            m
        }
    }
}

/// When `Δ` is recomputed during awakening.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refresh {
    Once,
    #[default]
    EveryEpoch,
}

/// Whether awakening also updates the encoder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTune {
    #[default]
    Frozen,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Upper bound on concept-prediction epochs.
    pub cp_epochs: usize,
    /// Stop CP training after this many epochs without BCE improvement.
    pub cp_patience: Option<usize>,
    pub awaken_epochs: usize,
    pub batch_size: usize,
    /// Learning rate for the encoder and CP head.
    pub lr: f64,
    /// Learning rate for the grounding head.
    pub head_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub refresh: Refresh,
    pub finetune: FineTune,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cp_epochs: 60,
            cp_patience: Some(5),
            awaken_epochs: 30,
            batch_size: 16,
            lr: 3e-4,
            head_lr: 3e-3,
            weight_decay: 0.01,
            seed: 7,
            refresh: Refresh::EveryEpoch,
            finetune: FineTune::Frozen,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(EtaError::config("train.lr", format!("must be > 0, got {}", self.lr)));
        }
        if !(self.head_lr > 0.0 && self.head_lr.is_finite()) {
            return Err(EtaError::config(
                "train.head_lr",
                format!("must be > 0, got {}", self.head_lr),
            ));
        }
        if self.batch_size == 0 {
            return Err(EtaError::config("train.batch_size", "must be positive"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(EtaError::config("train.weight_decay", "must be >= 0"));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    /// The full-scale schedule used with pretrained encoders.
    pub fn full_scale() -> Self {
        Self {
            cp_epochs: 50,
            cp_patience: None,
            awaken_epochs: 50,
            lr: 3e-5,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ConceptPrediction,
    Awakening,
    Contrast,
}

/// One JSON-lines trace entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<usize>,
}

impl TraceRecord {
    pub fn train(phase: Phase, epoch: usize, loss: f64) -> Self {
        Self {
            phase,
            epoch,
            split: "train".into(),
            loss,
            accuracy: None,
            f1: None,
            skipped: None,
        }
    }
}

fn labels_f64(v: &WeakView<'_>) -> Vec<f64> {
    v.weak_labels.iter().map(|l| f64::from(u8::from(*l))).collect()
}

/// Sums per-example gradient lists slot by slot, in order.
pub(crate) fn sum_grads(parts: Vec<Vec<Option<Mat>>>, slots: usize) -> Vec<Option<Mat>> {
    let mut out: Vec<Option<Mat>> = (0..slots).map(|_| None).collect();
    for part in parts {
        for (i, g) in part.into_iter().enumerate().take(slots) {
            if let Some(g) = g {
                match &mut out[i] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
        }
    }
    out
}

pub(crate) fn scale_grads(grads: &mut [Option<Mat>], s: f64) {
    for g in grads.iter_mut().flatten() {
        *g *= s;
    }
}

pub(crate) fn epoch_order(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

struct CpStats {
    bce: f64,
    correct: usize,
    concepts: usize,
}

fn cp_stats(logits: &[f64], labels: &[f64]) -> CpStats {
    let mut bce = 0.0;
    let mut correct = 0;
    for (z, l) in logits.iter().zip(labels) {
        bce += tape::bce_with_logits(*z, *l);
        correct += usize::from((tape::sigmoid(*z) >= 0.5) == (*l > 0.5));
    }
    CpStats {
        bce,
        correct,
        concepts: labels.len(),
    }
}

/// Trains the CP path with mean binary cross-entropy. A frozen encoder
/// only trains the head. Returns one trace record per epoch.
pub fn train_concept_prediction(
    data: &[WeakView<'_>],
    encoder: &mut MicroEncoder,
    head: &mut CpHead,
    cfg: &TrainConfig,
) -> Result<Vec<TraceRecord>> {
    cfg.validate()?;
    if head.d() != encoder.config().d {
        return Err(EtaError::Shape("CP head width does not match encoder".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;

    let frozen_reps = if encoder.is_frozen() {
        let enc: &MicroEncoder = encoder;
        Some(par::try_map(cfg.execution, data, |v| enc.encode(v, None))?)
    } else {
        None
    };
    let p = encoder.param_count();
    let mut shapes = if frozen_reps.is_some() {
        Vec::new()
    } else {
        encoder.shapes()
    };
    shapes.push(head.w.dim());
    let mut opt = AdamW::new(cfg.adam(cfg.lr), &shapes);

    for epoch in 0..cfg.cp_epochs {
        let order = epoch_order(&mut rng, data.len());
        let mut total = CpStats {
            bce: 0.0,
            correct: 0,
            concepts: 0,
        };
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(Vec<Option<Mat>>, CpStats)>> = match &frozen_reps {
                Some(reps) => {
                    let head_ref: &CpHead = head;
                    par::map(cfg.execution, batch, |&i| {
                        let e = &reps[i].concept_reps;
                        let labels = labels_f64(&data[i]);
                        let logits: Vec<f64> = e.dot(&head_ref.w.row(0)).to_vec();
                        let mut g = Mat::zeros(head_ref.w.dim());
                        for (k, (z, l)) in logits.iter().zip(&labels).enumerate() {
                            let s = tape::sigmoid(*z) - l;
                            g.row_mut(0).scaled_add(s, &e.row(k));
                        }
                        Ok((vec![Some(g)], cp_stats(&logits, &labels)))
                    })
                }
                None => {
                    let enc: &MicroEncoder = encoder;
                    let head_ref: &CpHead = head;
                    par::map(cfg.execution, batch, |&i| {
                        let v = &data[i];
                        let labels = labels_f64(v);
                        let mut t = Tape::new();
                        let (_, concepts) = enc.forward(&mut t, v, None, Some(0))?;
                        let w = t.param(p, &head_ref.w);
                        let logits = t.matmul_t(concepts, w);
                        let loss = t.bce_with_logits(logits, &labels);
                        let stats = cp_stats(t.value(logits).as_slice().unwrap(), &labels);
                        Ok((t.backward(loss).into_params(), stats))
                    })
                }
            };
            let mut parts = Vec::with_capacity(results.len());
            let mut batch_concepts = 0;
            for r in results {
                let (g, s) = r?;
                total.bce += s.bce;
                total.correct += s.correct;
                total.concepts += s.concepts;
                batch_concepts += s.concepts;
                parts.push(g);
            }
            if !total.bce.is_finite() {
                return Err(EtaError::Divergence { epoch, lr: cfg.lr });
            }
            let mut grads = sum_grads(parts, shapes.len());
            scale_grads(&mut grads, 1.0 / batch_concepts.max(1) as f64);
            if frozen_reps.is_some() {
                opt.step(&mut [&mut head.w], &grads);
            } else {
                let mut params = encoder.params_mut();
                params.push(&mut head.w);
                opt.step(&mut params, &grads);
            }
        }
        let loss = total.bce / total.concepts.max(1) as f64;
        if !loss.is_finite() {
            return Err(EtaError::Divergence { epoch, lr: cfg.lr });
        }
        trace.push(TraceRecord {
            accuracy: Some(total.correct as f64 / total.concepts.max(1) as f64),
            ..TraceRecord::train(Phase::ConceptPrediction, epoch, loss)
        });
        if loss < best - 1e-6 {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if cfg.cp_patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    Ok(trace)
}

/// Callback evaluating the current model after each awakening epoch.
pub type Monitor<'m> = dyn FnMut(usize, &MicroEncoder, &CpHead, &GroundingHead) -> Option<f64> + 'm;

#[derive(Debug, Clone)]
pub struct AwakenOutcome {
    pub trace: Vec<TraceRecord>,
    /// How many times `Δ` was recomputed over the data.
    pub delta_sweeps: usize,
    /// `Δ` used in the final epoch, one per instance.
    pub deltas: Vec<PseudoAlignment>,
}

fn cp_path_key(encoder: &MicroEncoder, cp: &CpHead) -> String {
    let mut key = encoder.fingerprint();
    for v in cp.w.iter() {
        key.push_str(&format!("{:016x}", v.to_bits()));
    }
    key
}

/// Trains the grounding head against `Δ`, repeating erasure per the
/// refresh policy. In joint mode the encoder and CP head are updated too,
/// with the CP loss kept alongside the awakening loss.
pub fn awaken(
    data: &[WeakView<'_>],
    encoder: &mut MicroEncoder,
    cp_head: &mut CpHead,
    g_head: &mut GroundingHead,
    cfg: &TrainConfig,
    mut monitor: Option<&mut Monitor<'_>>,
) -> Result<AwakenOutcome> {
    cfg.validate()?;
    let d = encoder.config().d;
    if g_head.d() != d || cp_head.d() != d {
        return Err(EtaError::Shape("head widths do not match encoder".into()));
    }
    let joint = cfg.finetune == FineTune::Joint && !encoder.is_frozen();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA3A3_5EED);
    let mut trace = Vec::new();
    let mut sweeps = 0;
    let mut cache: Option<(String, Vec<Erasure>)> = None;

    let p = encoder.param_count();
    let head_shapes = [g_head.we.dim(), g_head.wq.dim()];
    let mut head_opt = AdamW::new(cfg.adam(cfg.head_lr), &head_shapes);
    let mut enc_opt = joint.then(|| {
        let mut s = encoder.shapes();
        s.push(cp_head.w.dim());
        AdamW::new(cfg.adam(cfg.lr), &s)
    });

    for epoch in 0..cfg.awaken_epochs {
        let key = cp_path_key(encoder, cp_head);
        let stale = match (&cache, cfg.refresh) {
            (None, _) => true,
            (Some(_), Refresh::Once) => false,
            (Some((k, _)), Refresh::EveryEpoch) => *k != key,
        };
        if stale {
            let enc: &MicroEncoder = encoder;
            let cp: &CpHead = cp_head;
            // erasure passes run sequentially inside each instance here;
            // the instances themselves fan out
            let sweep = par::try_map(cfg.execution, data, |v| {
                erase(v, v.weak_labels, enc, cp, Execution::Sequential)
            })?;
            cache = Some((key, sweep));
            sweeps += 1;
        }
        let erasures = &cache.as_ref().expect("filled above").1;

        let order = epoch_order(&mut rng, data.len());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            if joint {
                let enc: &MicroEncoder = encoder;
                let cp: &CpHead = cp_head;
                let gh: &GroundingHead = g_head;
                let results = par::map(cfg.execution, batch, |&i| -> Result<(Vec<Option<Mat>>, f64)> {
                    let v = &data[i];
                    let mut t = Tape::new();
                    let (tokens, concepts) = enc.forward(&mut t, v, None, Some(0))?;
                    let wl = t.param(p, &cp.w);
                    let we = t.param(p + 1, &gh.we);
                    let wq = t.param(p + 2, &gh.wq);
                    let a = t.matmul_t(tokens, wq);
                    let b = t.matmul_t(concepts, we);
                    let g = t.matmul_t(a, b);
                    let g = t.scale(g, 1.0 / (d as f64).sqrt());
                    let alpha = t.softmax_cols(g);
                    let aw = t.weighted_neg_log(alpha, erasures[i].delta.matrix(), LOG_FLOOR);
                    let logits = t.matmul_t(concepts, wl);
                    let bce = t.bce_with_logits(logits, &labels_f64(v));
                    let bce = t.scale(bce, 1.0 / v.weak_labels.len() as f64);
                    let total = t.add(aw, bce);
                    let aw_val = t.value(aw)[[0, 0]];
                    Ok((t.backward(total).into_params(), aw_val))
                });
                let mut parts = Vec::with_capacity(results.len());
                for r in results {
                    let (g, l) = r?;
                    epoch_loss += l;
                    parts.push(g);
                }
                let mut grads = sum_grads(parts, p + 3);
                scale_grads(&mut grads, scale);
                let head_grads = vec![grads[p + 1].take(), grads[p + 2].take()];
                grads.truncate(p + 1);
                let mut params = encoder.params_mut();
                params.push(&mut cp_head.w);
                enc_opt.as_mut().expect("joint optimizer").step(&mut params, &grads);
                head_opt.step(&mut [&mut g_head.we, &mut g_head.wq], &head_grads);
            } else {
                let gh: &GroundingHead = g_head;
                let results = par::map(cfg.execution, batch, |&i| {
                    awakening_gradients(&erasures[i].encoding, gh, &erasures[i].delta)
                });
                let mut parts = Vec::with_capacity(results.len());
                for r in results {
                    let g = r?;
                    epoch_loss += g.loss;
                    parts.push(vec![Some(g.we), Some(g.wq)]);
                }
                let mut grads = sum_grads(parts, 2);
                scale_grads(&mut grads, scale);
                head_opt.step(&mut [&mut g_head.we, &mut g_head.wq], &grads);
            }
            if !epoch_loss.is_finite() {
                return Err(EtaError::Divergence { epoch, lr: cfg.head_lr });
            }
        }
        let loss = epoch_loss / data.len().max(1) as f64;
        trace.push(TraceRecord::train(Phase::Awakening, epoch, loss));
        if let Some(m) = monitor.as_mut() {
            if let Some(f1) = m(epoch, encoder, cp_head, g_head) {
                trace.push(TraceRecord {
                    split: "dev".into(),
                    f1: Some(f1),
                    ..TraceRecord::train(Phase::Awakening, epoch, loss)
                });
            }
        }
    }
    let deltas = cache
        .map(|(_, e)| e.into_iter().map(|e| e.delta).collect())
        .unwrap_or_default();
    Ok(AwakenOutcome {
        trace,
        delta_sweeps: sweeps,
        deltas,
    })
}
