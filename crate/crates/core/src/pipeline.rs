//! End-to-end training and inference over grounding datasets.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{self, ContrastConfig, ContrastScorer};
use crate::corpus::{
    weak_views, ConceptKind, EntityTuple, GroundingInstance, LinkTuples, LinkingGold, SchemaTuple, Span,
};
use crate::encoder::{ContextEncoder, EncoderConfig, EncoderInit, MicroEncoder, Vocab};
use crate::error::{EtaError, Result};
use crate::eta::{
    self, awaken, delta_as_prediction, grounding_scores, normalize, predict_concepts, train_concept_prediction, CpHead,
    DeltaNorm, GroundingHead, PseudoAlignment, Refresh, TraceRecord, TrainConfig,
};
use crate::eval::{evaluate, EvalReport, Regime};
use crate::grounding::{
    export_one_hot, fuse, matrix_rows, merge_spans, produce_pairs, FusionMode, GroundingPair, PairConfig,
    PredictionRecord,
};
use crate::par::{self, Execution};
use crate::tape::Mat;

/// Datasets whose tokens the checkpoint vocabulary covers less than this
/// are rejected as mismatched.
pub const MIN_VOCAB_COVERAGE: f64 = 0.5;

/// Environment variable naming a directory for cached `Δ` matrices.
pub const CACHE_ENV: &str = "ETA_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub pairs: PairConfig,
    pub contrast: ContrastConfig,
    /// Train the contrastive baseline alongside the main model.
    pub train_contrast: bool,
    pub ngram_min_sim: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            pairs: PairConfig::default(),
            contrast: ContrastConfig::default(),
            train_contrast: true,
            ngram_min_sim: 0.8,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.pairs.validate()?;
        self.contrast.validate()?;
        if !(0.0..=1.0).contains(&self.ngram_min_sim) {
            return Err(EtaError::config("ngram_min_sim", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Applies one execution strategy to every training stage.
    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.train.execution = exec;
        self.contrast.execution = exec;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.encoder.seed = seed;
        self.train.seed = seed;
        self.contrast.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingMode {
    Eta,
    DeltaRaw,
    DeltaSoftmax,
    DeltaSum,
    Ngram,
    Sim,
    Contrast,
}

impl GroundingMode {
    pub const ALL: [GroundingMode; 7] = [
        Self::Eta,
        Self::DeltaRaw,
        Self::DeltaSoftmax,
        Self::DeltaSum,
        Self::Ngram,
        Self::Sim,
        Self::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Eta => "eta",
            Self::DeltaRaw => "delta_raw",
            Self::DeltaSoftmax => "delta_softmax",
            Self::DeltaSum => "delta_sum",
            Self::Ngram => "ngram",
            Self::Sim => "sim",
            Self::Contrast => "contrast",
        }
    }

    pub fn needs_model(self) -> bool {
        self != Self::Ngram
    }

    fn delta_norm(self) -> Option<DeltaNorm> {
        match self {
            Self::DeltaRaw => Some(DeltaNorm::Raw),
            Self::DeltaSoftmax => Some(DeltaNorm::Softmax),
            Self::DeltaSum => Some(DeltaNorm::Sum),
            _ => None,
        }
    }
}

impl fmt::Display for GroundingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GroundingMode {
    type Err = EtaError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| EtaError::config("mode", format!("unknown grounding mode `{s}`")))
    }
}

/// Which encoder the main model trains on top of.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderProbe {
    /// Encoder updated during concept prediction.
    #[default]
    Trained,
    /// Randomly initialized encoder that is never updated.
    RandomFrozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastModel {
    pub encoder: MicroEncoder,
    pub scorer: ContrastScorer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtaModel {
    pub config: PipelineConfig,
    pub encoder: MicroEncoder,
    pub cp: CpHead,
    pub grounding: GroundingHead,
    pub contrast: Option<ContrastModel>,
}

impl EtaModel {
    /// Rejects datasets the vocabulary barely covers.
    pub fn check_vocab(&self, data: &[GroundingInstance]) -> Result<()> {
        let cov = self.encoder.vocab().coverage(data);
        if cov < MIN_VOCAB_COVERAGE {
            return Err(EtaError::Mismatch(format!(
                "checkpoint vocabulary covers {:.1}% of dataset tokens (minimum {:.0}%)",
                cov * 100.0,
                MIN_VOCAB_COVERAGE * 100.0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EtaModel,
    pub trace: Vec<TraceRecord>,
    pub delta_sweeps: usize,
}

/// Held-out data scored after every awakening epoch.
pub struct DevMonitor<'a> {
    pub data: &'a [GroundingInstance],
    pub gold: &'a [LinkingGold],
    pub regime: Regime,
}

fn fresh_encoder(cfg: &PipelineConfig, vocab: Vocab) -> Result<MicroEncoder> {
    let enc_cfg = EncoderConfig {
        init: EncoderInit::Random,
        ..cfg.encoder.clone()
    };
    MicroEncoder::new(enc_cfg, vocab)
}

/// Concept prediction, then awakening; optionally the contrastive baseline.
pub fn train_eta(
    train: &[GroundingInstance],
    cfg: &PipelineConfig,
    probe: EncoderProbe,
    dev: Option<DevMonitor<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(EtaError::Validation("training set is empty".into()));
    }
    let views = weak_views(train);
    let mut encoder = match &cfg.encoder.init {
        EncoderInit::Random => MicroEncoder::new(cfg.encoder.clone(), Vocab::build(train))?,
        EncoderInit::Load(path) => {
            let mut e = crate::checkpoint::load(path)?.encoder;
            e.unfreeze();
            e
        }
    };
    if probe == EncoderProbe::RandomFrozen {
        encoder = fresh_encoder(cfg, encoder.vocab().clone())?;
        encoder.freeze();
    }
    let d = encoder.config().d;
    let mut cp = CpHead::zeros(d);
    let mut trace = train_concept_prediction(&views, &mut encoder, &mut cp, &cfg.train)?;
    // the encoder stays fixed from here on unless fine-tuned jointly
    let mut grounding = GroundingHead::identity(d);

    let exec = cfg.train.execution;
    let pairs_cfg = cfg.pairs;
    let mut monitor = dev.map(|m| {
        move |_epoch: usize, enc: &MicroEncoder, cp: &CpHead, g: &GroundingHead| -> Option<f64> {
            let preds = eta_records(m.data, enc, cp, g, &pairs_cfg, exec).ok()?;
            let links = predicted_links(&preds, m.data, m.regime).ok()?;
            evaluate(m.regime, m.gold, &links).ok().map(|r| r.overall.f1)
        }
    });
    let outcome = awaken(
        &views,
        &mut encoder,
        &mut cp,
        &mut grounding,
        &cfg.train,
        monitor.as_mut().map(|m| m as &mut eta::Monitor<'_>),
    )?;
    trace.extend(outcome.trace);

    let contrast = if cfg.train_contrast {
        let mut c_enc = fresh_encoder(cfg, encoder.vocab().clone())?;
        let out = baselines::contrast_train(&views, &mut c_enc, &cfg.contrast)?;
        trace.extend(out.trace);
        Some(ContrastModel {
            encoder: c_enc,
            scorer: out.scorer,
        })
    } else {
        None
    };
    Ok(TrainOutcome {
        model: EtaModel {
            config: cfg.clone(),
            encoder,
            cp,
            grounding,
            contrast,
        },
        trace,
        delta_sweeps: outcome.delta_sweeps,
    })
}

/// Extra per-record payloads in predictions files.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroundOptions {
    pub alpha: bool,
    pub one_hot: bool,
    pub fusion: Option<FusionMode>,
}

fn finish_record(
    q: &GroundingInstance,
    mode: GroundingMode,
    pairs: Vec<GroundingPair>,
    regime: Regime,
) -> PredictionRecord {
    let mut rec = PredictionRecord::new(q.id(), pairs);
    rec.system = Some(mode.name().to_string());
    if regime == Regime::Entity {
        rec.spans = merge_spans(&rec.pairs);
    }
    rec
}

fn eta_records(
    data: &[GroundingInstance],
    enc: &MicroEncoder,
    cp: &CpHead,
    g: &GroundingHead,
    cfg: &PairConfig,
    exec: Execution,
) -> Result<Vec<PredictionRecord>> {
    let regime = dataset_regime(data);
    par::try_map(exec, data, |q| {
        let e = enc.encode(q, None)?;
        let p = predict_concepts(&e, cp)?;
        let alpha = normalize(&grounding_scores(&e, g)?);
        let pairs = produce_pairs(alpha.matrix(), &p, q.concepts(), cfg);
        Ok(finish_record(q, GroundingMode::Eta, pairs, regime))
    })
}

/// File-backed cache of `Δ` matrices keyed by model and instance content.
#[derive(Debug, Clone, Default)]
pub struct DeltaCache {
    dir: Option<PathBuf>,
}

impl DeltaCache {
    pub fn from_env() -> Self {
        Self {
            dir: std::env::var_os(CACHE_ENV).map(PathBuf::from),
        }
    }

    pub fn at(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub fn disabled() -> Self {
        Self { dir: None }
    }

    fn key(model: &EtaModel, q: &GroundingInstance, labels: &[bool]) -> String {
        let mut h = Sha256::new();
        h.update(model.encoder.fingerprint());
        for v in model.cp.w.iter() {
            h.update(v.to_le_bytes());
        }
        h.update(q.to_json_line());
        h.update(labels.iter().map(|l| u8::from(*l)).collect::<Vec<_>>());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn path(dir: &Path, key: &str) -> PathBuf {
        dir.join(format!("delta-{key}.json"))
    }

    fn get_or_compute(
        &self,
        model: &EtaModel,
        q: &GroundingInstance,
        labels: &[bool],
        compute: impl FnOnce() -> Result<PseudoAlignment>,
    ) -> Result<PseudoAlignment> {
        let Some(dir) = &self.dir else { return compute() };
        let path = Self::path(dir, &Self::key(model, q, labels));
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(m) = serde_json::from_str::<Mat>(&text) {
                if let Ok(d) = PseudoAlignment::from_matrix(m) {
                    return Ok(d);
                }
            }
        }
        let delta = compute()?;
        std::fs::create_dir_all(dir).map_err(|e| EtaError::io(dir, e))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string(delta.matrix())?).map_err(|e| EtaError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| EtaError::io(&path, e))?;
        Ok(delta)
    }
}

/// Runs one grounding system over a dataset.
pub fn ground(
    model: Option<&EtaModel>,
    data: &[GroundingInstance],
    mode: GroundingMode,
    pairs_cfg: &PairConfig,
    opts: GroundOptions,
    exec: Execution,
    cache: &DeltaCache,
) -> Result<Vec<PredictionRecord>> {
    pairs_cfg.validate()?;
    let regime = dataset_regime(data);
    if mode == GroundingMode::Ngram {
        let min_sim = model.map_or(PipelineConfig::default().ngram_min_sim, |m| m.config.ngram_min_sim);
        return par::try_map(exec, data, |q| {
            Ok(finish_record(q, mode, baselines::ngram_match(q, min_sim)?, regime))
        });
    }
    let model = model.ok_or_else(|| EtaError::MissingArtifact(format!("mode `{mode}` needs a checkpoint")))?;
    model.check_vocab(data)?;

    match mode {
        GroundingMode::Eta => par::try_map(exec, data, |q| {
            let e = model.encoder.encode(q, None)?;
            let p = predict_concepts(&e, &model.cp)?;
            let alpha = normalize(&grounding_scores(&e, &model.grounding)?).into_matrix();
            let pairs = produce_pairs(&alpha, &p, q.concepts(), pairs_cfg);
            let mut rec = finish_record(q, mode, pairs, regime);
            if opts.one_hot {
                rec.one_hot = Some(export_one_hot(&rec.pairs, q.concepts(), e.n())?);
            }
            if let Some(fm) = opts.fusion {
                rec.fused = Some(matrix_rows(&fuse(&e, &alpha, fm)?));
            }
            if opts.alpha {
                rec.alpha = Some(matrix_rows(&alpha));
                rec.question_tokens = Some(q.question_tokens().to_vec());
                rec.concepts = Some(q.concepts().iter().map(|c| c.id.clone()).collect());
            }
            Ok(rec)
        }),
        GroundingMode::DeltaRaw | GroundingMode::DeltaSoftmax | GroundingMode::DeltaSum => {
            let norm = mode.delta_norm().expect("delta mode");
            // instances fan out; erasure passes inside each run sequentially
            par::try_map(exec, data, |q| {
                let e = model.encoder.encode(q, None)?;
                let p = predict_concepts(&e, &model.cp)?;
                let labels = p.mentioned(pairs_cfg.p_gate);
                let delta = cache.get_or_compute(model, q, &labels, || {
                    Ok(eta::erase(q, &labels, &model.encoder, &model.cp, Execution::Sequential)?.delta)
                })?;
                let pred = delta_as_prediction(&delta, norm);
                let pairs = produce_pairs(&pred, &p, q.concepts(), pairs_cfg);
                let mut rec = finish_record(q, mode, pairs, regime);
                if opts.alpha {
                    rec.alpha = Some(matrix_rows(&pred));
                    rec.question_tokens = Some(q.question_tokens().to_vec());
                    rec.concepts = Some(q.concepts().iter().map(|c| c.id.clone()).collect());
                }
                Ok(rec)
            })
        }
        GroundingMode::Sim => {
            let untuned = fresh_encoder(&model.config, model.encoder.vocab().clone())?;
            par::try_map(exec, data, |q| {
                let e = untuned.encode(q, None)?;
                Ok(finish_record(q, mode, baselines::sim_pairs(&e, q, pairs_cfg), regime))
            })
        }
        GroundingMode::Contrast => {
            let c = model
                .contrast
                .as_ref()
                .ok_or_else(|| EtaError::MissingArtifact("checkpoint has no contrast model".into()))?;
            par::try_map(exec, data, |q| {
                let pairs = baselines::contrast_pairs(q, &c.encoder, &c.scorer, pairs_cfg)?;
                Ok(finish_record(q, mode, pairs, regime))
            })
        }
        GroundingMode::Ngram => unreachable!("handled above"),
    }
}

/// Entity datasets are those whose every concept is an entity.
pub fn dataset_regime(data: &[GroundingInstance]) -> Regime {
    let all_entities = !data.is_empty()
        && data
            .iter()
            .all(|q| q.concepts().iter().all(|c| c.kind == ConceptKind::Entity));
    if all_entities {
        Regime::Entity
    } else {
        Regime::Schema
    }
}

fn runs(mut tokens: Vec<usize>) -> Vec<Span> {
    tokens.sort_unstable();
    tokens.dedup();
    let mut out: Vec<Span> = Vec::new();
    for t in tokens {
        match out.last_mut() {
            Some(s) if s.end == t => s.end = t + 1,
            _ => out.push(Span { start: t, end: t + 1 }),
        }
    }
    out
}

/// Evaluation targets built from each instance's annotated links.
pub fn reference_links(data: &[GroundingInstance], regime: Regime) -> Result<Vec<LinkingGold>> {
    data.iter()
        .map(|q| {
            let links = q
                .gold_links()
                .ok_or_else(|| EtaError::Validation(format!("instance `{}` has no gold_links", q.id())))?;
            let tuples = match regime {
                Regime::Schema => LinkTuples::Schema(
                    links
                        .iter()
                        .map(|l| SchemaTuple {
                            concept: l.concept.clone(),
                            token: l.token,
                            kind: kind_of(q, &l.concept),
                        })
                        .collect(),
                ),
                Regime::Entity => {
                    let mut out = std::collections::BTreeSet::new();
                    for c in q.concepts() {
                        let toks = links.iter().filter(|l| l.concept == c.id).map(|l| l.token).collect();
                        out.extend(runs(toks).into_iter().map(|span| EntityTuple {
                            entity: c.id.clone(),
                            span,
                        }));
                    }
                    LinkTuples::Entity(out)
                }
            };
            Ok(LinkingGold {
                instance_id: q.id().to_string(),
                tuples,
            })
        })
        .collect()
}

fn kind_of(q: &GroundingInstance, concept: &str) -> ConceptKind {
    q.concepts()
        .index_of(concept)
        .map_or(ConceptKind::Other, |k| q.concepts()[k].kind)
}

/// Converts prediction records into link tuples for scoring.
pub fn predicted_links(
    records: &[PredictionRecord],
    data: &[GroundingInstance],
    regime: Regime,
) -> Result<Vec<LinkingGold>> {
    let by_id: std::collections::HashMap<&str, &GroundingInstance> = data.iter().map(|q| (q.id(), q)).collect();
    records
        .iter()
        .map(|r| {
            let q = by_id
                .get(r.id.as_str())
                .ok_or_else(|| EtaError::Validation(format!("prediction for unknown instance `{}`", r.id)))?;
            let tuples = match regime {
                Regime::Schema => LinkTuples::Schema(
                    r.pairs
                        .iter()
                        .map(|p| SchemaTuple {
                            concept: p.concept_id.clone(),
                            token: p.token_index,
                            kind: kind_of(q, &p.concept_id),
                        })
                        .collect(),
                ),
                Regime::Entity => {
                    let spans = if r.spans.is_empty() {
                        merge_spans(&r.pairs)
                    } else {
                        r.spans.clone()
                    };
                    LinkTuples::Entity(
                        spans
                            .into_iter()
                            .map(|s| {
                                Ok(EntityTuple {
                                    entity: s.concept,
                                    span: Span::new(s.start, s.end)?,
                                })
                            })
                            .collect::<Result<_>>()?,
                    )
                }
            };
            Ok(LinkingGold {
                instance_id: r.id.clone(),
                tuples,
            })
        })
        .collect()
}

/// Grounds and scores one system against the dataset's annotated links.
pub fn score_mode(
    model: Option<&EtaModel>,
    data: &[GroundingInstance],
    mode: GroundingMode,
    pairs_cfg: &PairConfig,
    exec: Execution,
) -> Result<EvalReport> {
    let regime = dataset_regime(data);
    let reference = reference_links(data, regime)?;
    let preds = ground(
        model,
        data,
        mode,
        pairs_cfg,
        GroundOptions::default(),
        exec,
        &DeltaCache::disabled(),
    )?;
    evaluate(regime, &reference, &predicted_links(&preds, data, regime)?)
}

/// Candidate pair thresholds for [`tune_contrast_tau`].
pub const TAU_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Picks the contrastive baseline's pair threshold by F1 on a held-out
/// split with annotated links and stores it in the scorer. Ties keep the
/// smaller threshold.
pub fn tune_contrast_tau(model: &mut EtaModel, dev: &[GroundingInstance], exec: Execution) -> Result<f64> {
    let Some(c) = model.contrast.as_mut() else {
        return Err(EtaError::MissingArtifact(
            "model has no contrast baseline to tune".into(),
        ));
    };
    c.scorer.tau = None;
    let mut best = (f64::NEG_INFINITY, TAU_GRID[0]);
    for tau in TAU_GRID {
        let cfg = PairConfig {
            tau,
            ..model.config.pairs
        };
        let f1 = score_mode(Some(model), dev, GroundingMode::Contrast, &cfg, exec)?
            .overall
            .f1;
        if f1 > best.0 {
            best = (f1, tau);
        }
    }
    if let Some(c) = model.contrast.as_mut() {
        c.scorer.tau = Some(best.1);
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationProbe {
    RandomEncoder,
    RefreshOnce,
    DeltaModes,
}

impl FromStr for AblationProbe {
    type Err = EtaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_encoder" => Ok(Self::RandomEncoder),
            "refresh_once" => Ok(Self::RefreshOnce),
            "delta_modes" => Ok(Self::DeltaModes),
            other => Err(EtaError::config("probe", format!("unknown probe `{other}`"))),
        }
    }
}

/// Side-by-side reports for one paired experiment, scored on `eval`.
pub fn ablate(
    train: &[GroundingInstance],
    eval_set: &[GroundingInstance],
    cfg: &PipelineConfig,
    probe: AblationProbe,
) -> Result<Vec<(String, EvalReport)>> {
    let exec = cfg.train.execution;
    let base = PipelineConfig {
        train_contrast: false,
        ..cfg.clone()
    };
    match probe {
        AblationProbe::RandomEncoder => {
            let trained = train_eta(train, &base, EncoderProbe::Trained, None)?.model;
            let random = train_eta(train, &base, EncoderProbe::RandomFrozen, None)?.model;
            Ok(vec![
                (
                    "trained".into(),
                    score_mode(Some(&trained), eval_set, GroundingMode::Eta, &cfg.pairs, exec)?,
                ),
                (
                    "random_frozen".into(),
                    score_mode(Some(&random), eval_set, GroundingMode::Eta, &cfg.pairs, exec)?,
                ),
            ])
        }
        AblationProbe::RefreshOnce => {
            let mut out = Vec::new();
            for refresh in [Refresh::EveryEpoch, Refresh::Once] {
                let c = PipelineConfig {
                    train: TrainConfig {
                        refresh,
                        ..base.train.clone()
                    },
                    ..base.clone()
                };
                let m = train_eta(train, &c, EncoderProbe::Trained, None)?.model;
                let name = match refresh {
                    Refresh::EveryEpoch => "every_epoch",
                    Refresh::Once => "once",
                };
                out.push((
                    name.to_string(),
                    score_mode(Some(&m), eval_set, GroundingMode::Eta, &cfg.pairs, exec)?,
                ));
            }
            Ok(out)
        }
        AblationProbe::DeltaModes => {
            let m = train_eta(train, &base, EncoderProbe::Trained, None)?.model;
            [
                GroundingMode::Eta,
                GroundingMode::DeltaRaw,
                GroundingMode::DeltaSoftmax,
                GroundingMode::DeltaSum,
            ]
            .into_iter()
            .map(|mode| {
                Ok((
                    mode.name().to_string(),
                    score_mode(Some(&m), eval_set, mode, &cfg.pairs, exec)?,
                ))
            })
            .collect()
        }
    }
}

/// Side-by-side overall P/R/F table.
pub fn comparison_table(rows: &[(String, EvalReport)]) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>9} {:>9} {:>9} {:>7} {:>7} {:>7}",
        "system", "precision", "recall", "f1", "tp", "pred", "gold"
    );
    for (name, r) in rows {
        let o = &r.overall;
        let _ = writeln!(
            out,
            "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>7} {:>7}",
            name, o.precision, o.recall, o.f1, o.tp, o.pred_count, o.gold_count
        );
    }
    out
}
