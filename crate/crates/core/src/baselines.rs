//! Comparison systems: fuzzy n-gram matching, untuned dot-product
//! similarity, and a contrastively trained max-pool scorer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Question, WeakView};
use crate::encoder::{ContextEncoder, Encoding, MicroEncoder};
use crate::error::{EtaError, Result};
use crate::eta::{epoch_order, scale_grads, sum_grads, ConfidenceVector, GroundingHead, Phase, TraceRecord};
use crate::grounding::{produce_pairs, GroundingPair, PairConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::par::{self, Execution};
use crate::tape::{self, Mat, Tape};

/// Longest phrase the n-gram matcher considers.
pub const MAX_NGRAM: usize = 5;

/// A candidate phrase match `[start, end)` for one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSpan {
    pub start: usize,
    pub end: usize,
    pub concept_id: String,
    pub similarity: f64,
}

/// `1 - lev(a, b) / max(|a|, |b|)` on lowercased strings, counted in chars.
pub fn fuzzy_similarity(a: &str, b: &str) -> f64 {
    strsim::normalized_levenshtein(&a.to_lowercase(), &b.to_lowercase())
}

/// All n-gram/concept matches at or above `min_sim`, before overlap resolution.
pub fn ngram_candidates(q: &dyn Question, min_sim: f64) -> Vec<MatchSpan> {
    let words: Vec<String> = q.question_tokens().iter().map(|t| t.to_lowercase()).collect();
    let names: Vec<String> = q.concepts().iter().map(|c| c.tokens.join(" ").to_lowercase()).collect();
    let mut out = Vec::new();
    for start in 0..words.len() {
        for end in start + 1..=(start + MAX_NGRAM).min(words.len()) {
            let phrase = words[start..end].join(" ");
            for (c, name) in q.concepts().iter().zip(&names) {
                let similarity = strsim::normalized_levenshtein(&phrase, name);
                if similarity >= min_sim {
                    out.push(MatchSpan {
                        start,
                        end,
                        concept_id: c.id.clone(),
                        similarity,
                    });
                }
            }
        }
    }
    out
}

/// Fuzzy string matching of question n-grams against concept names.
/// Overlaps are resolved greedily by similarity, then span length, then
/// start position; every token of an accepted span yields a pair.
pub fn ngram_match(q: &dyn Question, min_sim: f64) -> Result<Vec<GroundingPair>> {
    if !(0.0..=1.0).contains(&min_sim) {
        return Err(EtaError::config(
            "ngram.min_sim",
            format!("must lie in [0, 1], got {min_sim}"),
        ));
    }
    let mut cands = ngram_candidates(q, min_sim);
    // candidates are generated in (start, end, concept) order, so a stable
    // sort keeps concept order as the last tie-break
    cands.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then((b.end - b.start).cmp(&(a.end - a.start)))
            .then(a.start.cmp(&b.start))
    });
    let mut taken = vec![false; q.question_tokens().len()];
    let mut pairs = Vec::new();
    for m in cands {
        if taken[m.start..m.end].iter().any(|t| *t) {
            continue;
        }
        for (t, slot) in taken.iter_mut().enumerate().take(m.end).skip(m.start) {
            *slot = true;
            pairs.push(GroundingPair {
                token_index: t,
                concept_id: m.concept_id.clone(),
                score: m.similarity,
            });
        }
    }
    pairs.sort_by_key(|p| p.token_index);
    Ok(pairs)
}

/// `score[n][k] = q_n · e_k` from an untuned encoder.
pub fn sim_baseline(enc: &Encoding) -> Mat {
    enc.token_reps.dot(&enc.concept_reps.t())
}

/// Pairs from similarity scores: column softmax, then the shared pair
/// producer with every concept treated as predicted.
pub fn sim_pairs(enc: &Encoding, q: &dyn Question, cfg: &PairConfig) -> Vec<GroundingPair> {
    let alpha = tape::softmax_cols(&sim_baseline(enc));
    let p = ConfidenceVector(vec![1.0; enc.k()]);
    produce_pairs(&alpha, &p, q.concepts(), cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastConfig {
    pub epochs: usize,
    pub margin: f64,
    pub lr: f64,
    pub head_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            margin: 0.5,
            lr: 3e-4,
            head_lr: 3e-3,
            weight_decay: 0.01,
            batch_size: 16,
            seed: 7,
            execution: Execution::Parallel,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(EtaError::config("contrast.lr", format!("must be > 0, got {}", self.lr)));
        }
        if !(self.head_lr > 0.0 && self.head_lr.is_finite()) {
            return Err(EtaError::config("contrast.head_lr", "must be > 0"));
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return Err(EtaError::config("contrast.margin", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(EtaError::config("contrast.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Bilinear token-concept scorer trained with a max-pool margin loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastScorer {
    pub head: GroundingHead,
    /// Aggregate-score threshold above which a concept counts as mentioned.
    pub threshold: f64,
    /// Pair threshold tuned for this scorer; `None` uses the caller's.
    #[serde(default)]
    pub tau: Option<f64>,
}

impl ContrastScorer {
    /// Token-concept similarity matrix `N×K`.
    pub fn scores(&self, enc: &Encoding) -> Result<Mat> {
        crate::eta::grounding_scores(enc, &self.head)
    }

    /// Per-concept max over tokens.
    pub fn aggregate(scores: &Mat) -> Vec<f64> {
        scores
            .columns()
            .into_iter()
            .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    /// Soft mention gate `sigmoid(agg_k - threshold)`.
    pub fn confidences(&self, scores: &Mat) -> ConfidenceVector {
        ConfidenceVector(
            Self::aggregate(scores)
                .into_iter()
                .map(|a| tape::sigmoid(a - self.threshold))
                .collect(),
        )
    }

    pub fn pairs(&self, enc: &Encoding, q: &dyn Question, cfg: &PairConfig) -> Result<Vec<GroundingPair>> {
        let s = self.scores(enc)?;
        let alpha = tape::softmax_cols(&s);
        let cfg = PairConfig {
            tau: self.tau.unwrap_or(cfg.tau),
            ..*cfg
        };
        Ok(produce_pairs(&alpha, &self.confidences(&s), q.concepts(), &cfg))
    }
}

/// Hinge loss of one instance's aggregate scores; `None` when the
/// instance lacks a mentioned or an unmentioned concept.
pub fn contrast_loss(agg: &[f64], labels: &[bool], margin: f64) -> Option<f64> {
    let (pos, neg) = split_labels(labels)?;
    let mut loss = 0.0;
    for &p in &pos {
        for &n in &neg {
            loss += (margin - agg[p] + agg[n]).max(0.0);
        }
    }
    Some(loss)
}

fn split_labels(labels: &[bool]) -> Option<(Vec<usize>, Vec<usize>)> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&k| labels[k]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&k| !labels[k]).collect();
    (!pos.is_empty() && !neg.is_empty()).then_some((pos, neg))
}

/// Picks the threshold on aggregate scores that best separates mentioned
/// from unmentioned concepts in the training labels.
pub fn calibrate_threshold(samples: &[(f64, bool)]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sorted: Vec<(f64, bool)> = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positives = sorted.iter().filter(|s| s.1).count();
    // threshold below everything: all predicted positive
    let mut correct = positives;
    let mut best = (correct, sorted[0].0 - 1.0);
    for i in 0..sorted.len() {
        correct = if sorted[i].1 { correct - 1 } else { correct + 1 };
        let cut = match sorted.get(i + 1) {
            Some(next) if next.0 == sorted[i].0 => continue,
            Some(next) => 0.5 * (sorted[i].0 + next.0),
            None => sorted[i].0 + 1.0,
        };
        if correct > best.0 {
            best = (correct, cut);
        }
    }
    best.1
}

pub struct ContrastOutcome {
    pub scorer: ContrastScorer,
    pub trace: Vec<TraceRecord>,
}

/// Trains the encoder and a bilinear scorer jointly on weak labels.
pub fn contrast_train(
    data: &[WeakView<'_>],
    encoder: &mut MicroEncoder,
    cfg: &ContrastConfig,
) -> Result<ContrastOutcome> {
    cfg.validate()?;
    let d = encoder.config().d;
    let mut head = GroundingHead::random(d, cfg.seed ^ 0xC0_4714);
    let joint = !encoder.is_frozen();
    let p = if joint { encoder.param_count() } else { 0 };
    let adam = |lr: f64| AdamWConfig {
        lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut enc_opt = joint.then(|| AdamW::new(adam(cfg.lr), &encoder.shapes()));
    let mut head_opt = AdamW::new(adam(cfg.head_lr), &[head.we.dim(), head.wq.dim()]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0_4714);
    let mut trace = Vec::new();

    for epoch in 0..cfg.epochs {
        let order = epoch_order(&mut rng, data.len());
        let mut total = 0.0;
        let mut skipped = 0;
        for batch in order.chunks(cfg.batch_size) {
            let enc: &MicroEncoder = encoder;
            let h: &GroundingHead = &head;
            let results = par::map(cfg.execution, batch, |&i| -> Result<Option<(Vec<Option<Mat>>, f64)>> {
                let v = &data[i];
                let Some((pos, neg)) = split_labels(v.weak_labels) else {
                    return Ok(None);
                };
                let mut t = Tape::new();
                let (tokens, concepts) = enc.forward(&mut t, v, None, joint.then_some(0))?;
                let we = t.param(p, &h.we);
                let wq = t.param(p + 1, &h.wq);
                let a = t.matmul_t(tokens, wq);
                let b = t.matmul_t(concepts, we);
                let s = t.matmul_t(a, b);
                let s = t.scale(s, 1.0 / (d as f64).sqrt());
                let agg = t.col_max(s);
                let loss = t.pairwise_hinge(agg, &pos, &neg, cfg.margin);
                let pairs = (pos.len() * neg.len()) as f64;
                let value = t.value(loss)[[0, 0]];
                let loss = t.scale(loss, 1.0 / pairs);
                Ok(Some((t.backward(loss).into_params(), value)))
            });
            let mut parts = Vec::new();
            for r in results {
                match r? {
                    Some((g, l)) => {
                        total += l;
                        parts.push(g);
                    }
                    None => skipped += 1,
                }
            }
            if parts.is_empty() {
                continue;
            }
            let mut grads = sum_grads(parts, p + 2);
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            let head_grads = vec![grads[p].take(), grads[p + 1].take()];
            if let Some(opt) = enc_opt.as_mut() {
                grads.truncate(p);
                opt.step(&mut encoder.params_mut(), &grads);
            }
            head_opt.step(&mut [&mut head.we, &mut head.wq], &head_grads);
        }
        if !total.is_finite() {
            return Err(EtaError::Divergence { epoch, lr: cfg.lr });
        }
        trace.push(TraceRecord {
            skipped: Some(skipped),
            ..TraceRecord::train(Phase::Contrast, epoch, total / data.len().max(1) as f64)
        });
    }

    let enc: &MicroEncoder = encoder;
    let h = &head;
    let samples = par::try_map(cfg.execution, data, |v| -> Result<Vec<(f64, bool)>> {
        let e = enc.encode(v, None)?;
        let s = crate::eta::grounding_scores(&e, h)?;
        Ok(ContrastScorer::aggregate(&s)
            .into_iter()
            .zip(v.weak_labels.iter().copied())
            .collect())
    })?;
    let threshold = calibrate_threshold(&samples.concat());
    Ok(ContrastOutcome {
        scorer: ContrastScorer {
            head,
            threshold,
            tau: None,
        },
        trace,
    })
}

/// Encodes each question with `encoder` and applies the contrast scorer.
pub fn contrast_pairs(
    q: &dyn Question,
    encoder: &dyn ContextEncoder,
    scorer: &ContrastScorer,
    cfg: &PairConfig,
) -> Result<Vec<GroundingPair>> {
    scorer.pairs(&encoder.encode(q, None)?, q, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Concept, ConceptKind, ConceptSet, GroundingInstance};
    use ndarray::array;

    fn inst(tokens: &[&str], concepts: &[&str]) -> GroundingInstance {
        let cs = ConceptSet::new(concepts.iter().map(|c| Concept::word(c, ConceptKind::Column)).collect()).unwrap();
        GroundingInstance::new(
            "q",
            tokens.iter().map(|s| s.to_string()).collect(),
            cs,
            vec![false; concepts.len()],
            None,
        )
        .unwrap()
    }

    #[test]
    fn exact_match_scores_one() {
        let p = ngram_match(&inst(&["singer"], &["singer"]), 0.8).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].token_index, p[0].score), (0, 1.0));
    }

    #[test]
    fn plural_matches_above_threshold() {
        let p = ngram_match(&inst(&["singers"], &["singer"]), 0.8).unwrap();
        assert!((p[0].score - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_alphabets_match_nothing() {
        assert!(ngram_match(&inst(&["xyz", "qq"], &["abc"]), 0.5).unwrap().is_empty());
    }

    #[test]
    fn case_does_not_matter() {
        let a = ngram_match(&inst(&["How", "many", "SINGERS"], &["singer"]), 0.8).unwrap();
        let b = ngram_match(&inst(&["how", "many", "singers"], &["singer"]), 0.8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn better_match_wins_overlap() {
        let i = inst(&["song", "name"], &["song_name", "song"]);
        // "song name" vs "song_name": 8/9; "song" vs "song": 1.0 wins token 0
        let p = ngram_match(&i, 0.8).unwrap();
        assert_eq!(p[0].concept_id, "song");
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn multi_token_span_covers_each_token() {
        let i = inst(&["the", "song", "name"], &["song_name"]);
        let mut cs = i.concepts().as_slice().to_vec();
        cs[0] = Concept::new("song_name", vec!["song".into(), "name".into()], ConceptKind::Column).unwrap();
        let i = GroundingInstance::new(
            "q",
            i.question_tokens().to_vec(),
            ConceptSet::new(cs).unwrap(),
            vec![false],
            None,
        )
        .unwrap();
        let toks: Vec<usize> = ngram_match(&i, 0.9).unwrap().iter().map(|p| p.token_index).collect();
        assert_eq!(toks, vec![1, 2]);
    }

    #[test]
    fn bad_min_sim_is_a_config_error() {
        assert!(ngram_match(&inst(&["a"], &["a"]), 1.5).is_err());
    }

    #[test]
    fn sim_scores_are_dot_products() {
        let enc = Encoding::new(array![[1.0, 0.0], [0.0, 2.0]], array![[0.0, 1.0], [0.0, 2.0]]).unwrap();
        let s = sim_baseline(&enc);
        assert_eq!(s[[0, 0]], 0.0);
        assert_eq!(s[[1, 1]], 4.0);
    }

    #[test]
    fn hinge_cases() {
        assert_eq!(contrast_loss(&[1.0, 2.0], &[true, true], 0.5), None);
        assert_eq!(contrast_loss(&[2.0, 1.0], &[true, false], 0.5), Some(0.0));
        assert_eq!(contrast_loss(&[1.0, 1.0], &[true, false], 0.5), Some(0.5));
    }

    #[test]
    fn threshold_separates_classes() {
        let t = calibrate_threshold(&[(0.1, false), (0.2, false), (0.9, true), (1.1, true)]);
        assert!(t > 0.2 && t < 0.9);
        let all_pos = calibrate_threshold(&[(0.5, true), (0.7, true)]);
        assert!(all_pos < 0.5);
    }
}
