//! Contextual encoders.
//!
//! The input layout is `[CLS] x_1..x_N [SEP] c_1 [SEP] c_2 ... [SEP] c_K`.
//! Token representations are read at each question word, concept
//! representations at the first token of each concept. Erasing word `n`
//! replaces it with `[UNK]` before encoding.
//!
//! [`MicroEncoder`] is a small pre-norm bidirectional transformer trained
//! from scratch; it runs on the autodiff [`Tape`] so it can be optimized
//! jointly with the heads.

use std::collections::{BTreeSet, HashMap};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{GroundingInstance, Question};
use crate::error::{EtaError, Result};
use crate::tape::{Mat, Tape, Var};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

/// Word-level vocabulary with reserved ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let expected = [PAD, UNK, CLS, SEP];
        if tokens.len() < 4 || tokens[..4].iter().zip(expected).any(|(a, b)| a != b) {
            return Err(EtaError::Validation(
                "vocabulary must start with [PAD] [UNK] [CLS] [SEP]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(EtaError::Validation(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Builds a sorted vocabulary over every question and concept token.
    pub fn build<'a, Q: Question + 'a>(data: impl IntoIterator<Item = &'a Q>) -> Self {
        let mut words = BTreeSet::new();
        for q in data {
            words.extend(q.question_tokens().iter().map(|t| t.to_lowercase()));
            for c in q.concepts() {
                words.extend(c.tokens.iter().map(|t| t.to_lowercase()));
            }
        }
        let reserved = [PAD, UNK, CLS, SEP];
        let mut tokens: Vec<String> = reserved.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !reserved.contains(&w.as_str())));
        Self::from_tokens(tokens).expect("reserved tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(&token.to_lowercase()).copied()
    }

    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Fraction of question and concept tokens in `data` that are known.
    pub fn coverage(&self, data: &[GroundingInstance]) -> f64 {
        let mut total = 0usize;
        let mut known = 0usize;
        for inst in data {
            let words = inst
                .question_tokens()
                .iter()
                .chain(inst.concepts().iter().flat_map(|c| c.tokens.iter()));
            for w in words {
                total += 1;
                known += usize::from(self.get(w).is_some());
            }
        }
        if total == 0 {
            1.0
        } else {
            known as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "path")]
pub enum EncoderInit {
    Random,
    Load(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub seed: u64,
    pub init: EncoderInit,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 3,
            heads: 4,
            ffn: 128,
            max_len: 256,
            seed: 7,
            init: EncoderInit::Random,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("encoder.d", self.d),
            ("encoder.layers", self.layers),
            ("encoder.heads", self.heads),
            ("encoder.ffn", self.ffn),
            ("encoder.max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(EtaError::config(name, "must be positive"));
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(EtaError::config(
                "encoder.heads",
                format!("d = {} is not divisible by {} heads", self.d, self.heads),
            ));
        }
        Ok(())
    }
}

/// Per-question token reps (`N×d`) and per-concept reps (`K×d`).
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub token_reps: Mat,
    pub concept_reps: Mat,
}

impl Encoding {
    pub fn new(token_reps: Mat, concept_reps: Mat) -> Result<Self> {
        if token_reps.ncols() != concept_reps.ncols() {
            return Err(EtaError::Shape(format!(
                "token width {} != concept width {}",
                token_reps.ncols(),
                concept_reps.ncols()
            )));
        }
        Ok(Self {
            token_reps,
            concept_reps,
        })
    }

    pub fn d(&self) -> usize {
        self.token_reps.ncols()
    }

    pub fn n(&self) -> usize {
        self.token_reps.nrows()
    }

    pub fn k(&self) -> usize {
        self.concept_reps.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.token_reps
            .iter()
            .chain(self.concept_reps.iter())
            .all(|v| v.is_finite())
    }
}

/// Anything that maps a question and its concepts to an [`Encoding`].
pub trait ContextEncoder: Sync {
    fn dim(&self) -> usize;
    fn encode(&self, q: &dyn Question, erased: Option<usize>) -> Result<Encoding>;
}

/// Name and shape of one trainable tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamHandle {
    pub slot: usize,
    pub name: String,
    pub shape: (usize, usize),
}

/// Positions of the pieces of an encoded sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub ids: Vec<usize>,
    /// Position ids; concept segments share offsets so their order is immaterial.
    pub positions: Vec<usize>,
    /// 0 for `[CLS]` and the question, 1 for the concept segments.
    pub segments: Vec<usize>,
    pub question_pos: Vec<usize>,
    pub concept_pos: Vec<usize>,
}

const PER_LAYER: usize = 16;
/// Token, position and segment tables precede the layers.
const EMBEDDINGS: usize = 3;
const SEG_STD: f64 = 1.0;
const LAYER_NAMES: [&str; PER_LAYER] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MicroEncoder {
    config: EncoderConfig,
    vocab: Vocab,
    params: Vec<Mat>,
    names: Vec<String>,
    frozen: bool,
}

impl MicroEncoder {
    /// Random initialization; identical seeds give identical weights.
    pub fn new(config: EncoderConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let f = config.ffn;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut normal = |r: usize, c: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("valid std");
            Array2::from_shape_fn((r, c), |_| dist.sample(&mut rng))
        };
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut push = |name: String, m: Mat| {
            names.push(name);
            params.push(m);
        };
        push("tok_emb".into(), normal(vocab.len(), d, 1.0));
        push("pos_emb".into(), normal(config.max_len, d, 0.1));
        push("seg_emb".into(), normal(2, d, SEG_STD));
        let wstd = 1.0 / (d as f64).sqrt();
        for l in 0..config.layers {
            let shapes: [(usize, usize, f64); PER_LAYER] = [
                (1, d, -1.0),
                (1, d, 0.0),
                (d, d, wstd),
                (1, d, 0.0),
                (d, d, wstd),
                (1, d, 0.0),
                (d, d, wstd),
                (1, d, 0.0),
                (d, d, wstd),
                (1, d, 0.0),
                (1, d, -1.0),
                (1, d, 0.0),
                (d, f, wstd),
                (1, f, 0.0),
                (f, d, 1.0 / (f as f64).sqrt()),
                (1, d, 0.0),
            ];
            for (j, (r, c, std)) in shapes.into_iter().enumerate() {
                let m = if std < 0.0 {
                    Mat::ones((r, c))
                } else if std == 0.0 {
                    Mat::zeros((r, c))
                } else {
                    normal(r, c, std)
                };
                push(format!("layer{l}.{}", LAYER_NAMES[j]), m);
            }
        }
        push("ln_f.gain".into(), Mat::ones((1, d)));
        push("ln_f.bias".into(), Mat::zeros((1, d)));
        Ok(Self {
            config,
            vocab,
            params,
            names,
            frozen: false,
        })
    }

    /// Rebuilds an encoder from stored tensors, checking names and shapes.
    pub fn from_tensors(config: EncoderConfig, vocab: Vocab, tensors: Vec<(String, Mat)>) -> Result<Self> {
        let mut enc = Self::new(config, vocab)?;
        if tensors.len() != enc.params.len() {
            return Err(EtaError::Validation(format!(
                "expected {} encoder tensors, found {}",
                enc.params.len(),
                tensors.len()
            )));
        }
        for (i, (name, m)) in tensors.into_iter().enumerate() {
            if name != enc.names[i] || m.dim() != enc.params[i].dim() {
                return Err(EtaError::Validation(format!(
                    "encoder tensor {i}: expected `{}` {:?}, found `{name}` {:?}",
                    enc.names[i],
                    enc.params[i].dim(),
                    m.dim()
                )));
            }
            enc.params[i] = m;
        }
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.params.iter())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        self.params.iter_mut().collect()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.params.iter().map(|p| p.dim()).collect()
    }

    /// Handles for every weight, or none when frozen.
    pub fn trainable_parameters(&self) -> Vec<ParamHandle> {
        if self.frozen {
            return Vec::new();
        }
        self.names
            .iter()
            .zip(&self.params)
            .enumerate()
            .map(|(slot, (name, p))| ParamHandle {
                slot,
                name: name.clone(),
                shape: p.dim(),
            })
            .collect()
    }

    /// SHA-256 over every weight, for change detection and cache keys.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.tensors() {
            h.update(name.as_bytes());
            for v in p.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn layout(&self, q: &dyn Question, erased: Option<usize>) -> Result<SequenceLayout> {
        let n = q.question_tokens().len();
        if let Some(e) = erased {
            if e >= n {
                return Err(EtaError::Validation(format!(
                    "erased token {e} out of range for {n} tokens in `{}`",
                    q.id()
                )));
            }
        }
        let mut ids = vec![CLS_ID];
        let mut question_pos = Vec::with_capacity(n);
        for (i, t) in q.question_tokens().iter().enumerate() {
            question_pos.push(ids.len());
            ids.push(if erased == Some(i) { UNK_ID } else { self.vocab.id(t) });
        }
        let mut positions: Vec<usize> = (0..ids.len()).collect();
        let mut segments = vec![0; ids.len()];
        let mut concept_pos = Vec::with_capacity(q.concepts().len());
        for c in q.concepts() {
            ids.push(SEP_ID);
            concept_pos.push(ids.len());
            ids.extend(c.tokens.iter().map(|t| self.vocab.id(t)));
            // every concept segment restarts at the same offset
            positions.extend(n + 1..n + 2 + c.tokens.len());
            segments.resize(ids.len(), 1);
        }
        if ids.len() > self.config.max_len {
            return Err(EtaError::Length {
                id: q.id().to_string(),
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        Ok(SequenceLayout {
            ids,
            positions,
            segments,
            question_pos,
            concept_pos,
        })
    }

    /// Records the forward pass on `tape`. With `base_slot`, weights become
    /// parameters `base_slot..base_slot + param_count()`; otherwise constants.
    pub fn forward(
        &self,
        tape: &mut Tape,
        q: &dyn Question,
        erased: Option<usize>,
        base_slot: Option<usize>,
    ) -> Result<(Var, Var)> {
        let lay = self.layout(q, erased)?;
        let d = self.config.d;
        let heads = self.config.heads;
        let dh = d / heads;
        let w = |tape: &mut Tape, i: usize| match base_slot {
            Some(b) => tape.param(b + i, &self.params[i]),
            None => tape.constant(self.params[i].clone()),
        };

        let (tok, pos, seg) = match base_slot {
            Some(_) => {
                let te = w(tape, 0);
                let pe = w(tape, 1);
                let se = w(tape, 2);
                (
                    tape.gather_rows(te, &lay.ids),
                    tape.gather_rows(pe, &lay.positions),
                    tape.gather_rows(se, &lay.segments),
                )
            }
            None => (
                tape.constant(self.params[0].select(Axis(0), &lay.ids)),
                tape.constant(self.params[1].select(Axis(0), &lay.positions)),
                tape.constant(self.params[2].select(Axis(0), &lay.segments)),
            ),
        };
        let x = tape.add(tok, pos);
        let mut x = tape.add(x, seg);
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..self.config.layers {
            let p = EMBEDDINGS + l * PER_LAYER;
            let mut lw = [tape.constant(Mat::zeros((0, 0))); PER_LAYER];
            for (j, slot) in lw.iter_mut().enumerate() {
                *slot = w(tape, p + j);
            }
            let h = tape.layer_norm(x, lw[0], lw[1], 1e-5);
            let qm = tape.matmul(h, lw[2]);
            let qm = tape.add_row(qm, lw[3]);
            let km = tape.matmul(h, lw[4]);
            let km = tape.add_row(km, lw[5]);
            let vm = tape.matmul(h, lw[6]);
            let vm = tape.add_row(vm, lw[7]);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(qm, hd * dh, dh);
                let kh = tape.slice_cols(km, hd * dh, dh);
                let vh = tape.slice_cols(vm, hd * dh, dh);
                let sc = tape.matmul_t(qh, kh);
                let sc = tape.scale(sc, scale);
                let at = tape.softmax_rows(sc);
                outs.push(tape.matmul(at, vh));
            }
            let o = tape.concat_cols(&outs);
            let o = tape.matmul(o, lw[8]);
            let o = tape.add_row(o, lw[9]);
            x = tape.add(x, o);
            let h2 = tape.layer_norm(x, lw[10], lw[11], 1e-5);
            let f = tape.matmul(h2, lw[12]);
            let f = tape.add_row(f, lw[13]);
            let f = tape.gelu(f);
            let f = tape.matmul(f, lw[14]);
            let f = tape.add_row(f, lw[15]);
            x = tape.add(x, f);
        }
        let last = self.params.len();
        let gf = w(tape, last - 2);
        let bf = w(tape, last - 1);
        let x = tape.layer_norm(x, gf, bf, 1e-5);
        let tokens = tape.gather_rows(x, &lay.question_pos);
        let concepts = tape.gather_rows(x, &lay.concept_pos);
        Ok((tokens, concepts))
    }
}

impl ContextEncoder for MicroEncoder {
    fn dim(&self) -> usize {
        self.config.d
    }

    fn encode(&self, q: &dyn Question, erased: Option<usize>) -> Result<Encoding> {
        let mut tape = Tape::new();
        let (t, c) = self.forward(&mut tape, q, erased, None)?;
        Encoding::new(tape.value(t).clone(), tape.value(c).clone())
    }
}
