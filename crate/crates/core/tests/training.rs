mod common;

use common::instance;
use eta_grounding::checkpoint;
use eta_grounding::corpus::{weak_views, GroundingInstance};
use eta_grounding::encoder::{ContextEncoder, EncoderConfig, MicroEncoder, Vocab};
use eta_grounding::eta::{
    awaken, erase, predict_concepts, train_concept_prediction, CpHead, FineTune, GroundingHead, Monitor, Refresh,
    TrainConfig,
};
use eta_grounding::eval::{evaluate, Regime};
use eta_grounding::grounding::{produce_pairs, PairConfig, PredictionRecord};
use eta_grounding::par::Execution;
use eta_grounding::pipeline::{
    ground, predicted_links, reference_links, score_mode, train_eta, DeltaCache, EncoderProbe, EtaModel, GroundOptions,
    GroundingMode, PipelineConfig,
};
use eta_grounding::synthetic::{generate_synthetic_corpus, SyntheticSpec};
use eta_grounding::{EtaError, Result};

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        d: 16,
        layers: 1,
        heads: 2,
        ffn: 32,
        ..EncoderConfig::default()
    }
}

fn tiny_pipeline() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        encoder: tiny_encoder(),
        ..PipelineConfig::default()
    }
    .with_execution(Execution::Sequential);
    cfg.train.cp_epochs = 4;
    cfg.train.awaken_epochs = 3;
    cfg.contrast.epochs = 2;
    cfg
}

fn small_corpus(questions: usize) -> Vec<GroundingInstance> {
    generate_synthetic_corpus(&SyntheticSpec {
        questions,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .instances
}

fn sequential(cfg: TrainConfig) -> TrainConfig {
    TrainConfig {
        execution: Execution::Sequential,
        ..cfg
    }
}

fn eta_f1(data: &[GroundingInstance], enc: &MicroEncoder, cp: &CpHead, g: &GroundingHead) -> Result<f64> {
    let mut records = Vec::new();
    for q in data {
        let e = enc.encode(q, None)?;
        let p = predict_concepts(&e, cp)?;
        let alpha = eta_grounding::eta::normalize(&eta_grounding::eta::grounding_scores(&e, g)?);
        let pairs = produce_pairs(alpha.matrix(), &p, q.concepts(), &PairConfig::default());
        records.push(PredictionRecord::new(q.id(), pairs));
    }
    let gold = reference_links(data, Regime::Schema)?;
    let pred = predicted_links(&records, data, Regime::Schema)?;
    Ok(evaluate(Regime::Schema, &gold, &pred)?.overall.f1)
}

/// Reference configuration on the seed-7 corpus: CP separates the labels,
/// its loss falls at the start, and awakening raises held-out pair F1.
#[test]
fn reference_run_learns_labels_then_grounding() {
    let spec = SyntheticSpec::default();
    let train = generate_synthetic_corpus(&spec).unwrap().instances;
    let dev = generate_synthetic_corpus(&spec.with_split(1, 60)).unwrap().instances;
    let views = weak_views(&train);
    let mut enc = MicroEncoder::new(EncoderConfig::default(), Vocab::build(&train)).unwrap();
    let mut cp = CpHead::zeros(enc.config().d);
    let cfg = sequential(TrainConfig::default());

    let trace = train_concept_prediction(&views, &mut enc, &mut cp, &cfg).unwrap();
    let losses: Vec<f64> = trace.iter().map(|t| t.loss).collect();
    assert!(losses[1] <= losses[0] && losses[2] <= losses[1], "{losses:?}");
    let acc = trace.last().unwrap().accuracy.unwrap();
    assert!(acc >= 0.95, "final CP accuracy {acc}");

    let mut g = GroundingHead::identity(enc.config().d);
    let mut f1s = Vec::new();
    // checkpoints every fifth epoch, starting after the first
    let mut monitor = |e: usize, enc: &MicroEncoder, cp: &CpHead, g: &GroundingHead| {
        if !e.is_multiple_of(5) {
            return None;
        }
        let f = eta_f1(&dev, enc, cp, g).ok();
        f1s.push(f.unwrap_or(f64::NAN));
        f
    };
    awaken(
        &views,
        &mut enc,
        &mut cp,
        &mut g,
        &cfg,
        Some(&mut monitor as &mut Monitor<'_>),
    )
    .unwrap();
    assert!(f1s.len() >= 3);
    assert!(f1s[0] < f1s[1] && f1s[1] < f1s[2], "{f1s:?}");
    assert!(*f1s.last().unwrap() > f1s[0], "{f1s:?}");

    let model = EtaModel {
        config: PipelineConfig::default(),
        encoder: enc,
        cp,
        grounding: g,
        contrast: None,
    };
    let pc = PairConfig::default();
    let eta = score_mode(Some(&model), &dev, GroundingMode::Eta, &pc, Execution::Sequential).unwrap();
    let raw = score_mode(Some(&model), &dev, GroundingMode::DeltaRaw, &pc, Execution::Sequential).unwrap();
    assert!(
        eta.overall.f1 > raw.overall.f1,
        "eta {} vs delta_raw {}",
        eta.overall.f1,
        raw.overall.f1
    );
}

#[test]
fn one_instance_is_memorized() {
    let q = instance(
        "solo",
        &["show", "singer", "names"],
        &["singer", "name", "age", "country"],
        &[true, true, false, false],
    );
    let data = [q];
    let views = weak_views(&data);
    let mut enc = MicroEncoder::new(tiny_encoder(), Vocab::build(&data)).unwrap();
    let mut cp = CpHead::zeros(16);
    let cfg = sequential(TrainConfig {
        cp_epochs: 50,
        cp_patience: None,
        lr: 1e-2,
        ..TrainConfig::default()
    });
    let trace = train_concept_prediction(&views, &mut enc, &mut cp, &cfg).unwrap();
    assert_eq!(trace.len(), 50);
    let bce = trace.last().unwrap().loss;
    assert!(bce < 0.05, "final BCE {bce}");
}

#[test]
fn all_negative_labels_drive_confidences_down() {
    let data: Vec<GroundingInstance> = (0..6)
        .map(|i| {
            instance(
                &format!("n{i}"),
                &["what", "is", "this", ["a", "b", "c"][i % 3]],
                &["alpha", "beta", "gamma"],
                &[false, false, false],
            )
        })
        .collect();
    let views = weak_views(&data);
    let mut enc = MicroEncoder::new(tiny_encoder(), Vocab::build(&data)).unwrap();
    let mut cp = CpHead::zeros(16);
    let cfg = sequential(TrainConfig {
        cp_epochs: 60,
        cp_patience: None,
        lr: 3e-3,
        ..TrainConfig::default()
    });
    train_concept_prediction(&views, &mut enc, &mut cp, &cfg).unwrap();
    for q in &data {
        let p = predict_concepts(&enc.encode(q, None).unwrap(), &cp).unwrap();
        assert!(p.0.iter().all(|v| *v < 0.1), "{:?}", p.0);
    }
}

/// Shared setup for awakening tests: a tiny encoder after a few CP epochs.
fn after_cp(data: &[GroundingInstance]) -> (MicroEncoder, CpHead) {
    let views = weak_views(data);
    let mut enc = MicroEncoder::new(tiny_encoder(), Vocab::build(data)).unwrap();
    let mut cp = CpHead::zeros(16);
    let cfg = sequential(TrainConfig {
        cp_epochs: 3,
        ..TrainConfig::default()
    });
    train_concept_prediction(&views, &mut enc, &mut cp, &cfg).unwrap();
    (enc, cp)
}

#[test]
fn refresh_once_reuses_the_first_erasure_bit_for_bit() {
    let data = small_corpus(12);
    let views = weak_views(&data);
    let (enc0, cp0) = after_cp(&data);
    let before: Vec<_> = views
        .iter()
        .map(|v| {
            erase(v, v.weak_labels, &enc0, &cp0, Execution::Sequential)
                .unwrap()
                .delta
        })
        .collect();

    let run = |refresh: Refresh| {
        let (mut enc, mut cp) = (enc0.clone(), cp0.clone());
        let mut g = GroundingHead::identity(16);
        let cfg = sequential(TrainConfig {
            awaken_epochs: 3,
            refresh,
            finetune: FineTune::Joint,
            ..TrainConfig::default()
        });
        let out = awaken(&views, &mut enc, &mut cp, &mut g, &cfg, None).unwrap();
        (out, enc)
    };
    let (once, enc_once) = run(Refresh::Once);
    assert_eq!(once.delta_sweeps, 1);
    assert_eq!(once.deltas, before);
    // joint training did move the encoder, so a refresh would differ
    assert_ne!(enc_once.fingerprint(), enc0.fingerprint());
    let (every, _) = run(Refresh::EveryEpoch);
    assert_eq!(every.delta_sweeps, 3);
    assert_ne!(every.deltas, before);
}

#[test]
fn frozen_awakening_never_recomputes_delta() {
    let data = small_corpus(8);
    let views = weak_views(&data);
    let (mut enc, mut cp) = after_cp(&data);
    let fp = enc.fingerprint();
    let mut g = GroundingHead::identity(16);
    let cfg = sequential(TrainConfig {
        awaken_epochs: 3,
        ..TrainConfig::default()
    });
    let out = awaken(&views, &mut enc, &mut cp, &mut g, &cfg, None).unwrap();
    assert_eq!(out.delta_sweeps, 1);
    assert_eq!(enc.fingerprint(), fp);
    assert_ne!(g, GroundingHead::identity(16));
}

#[test]
fn zero_epochs_leave_the_heads_untouched() {
    let data = small_corpus(5);
    let views = weak_views(&data);
    let (mut enc, mut cp) = after_cp(&data);
    let cp_before = cp.clone();
    let mut g = GroundingHead::random(16, 3);
    let g_before = g.clone();
    let cfg = sequential(TrainConfig {
        awaken_epochs: 0,
        cp_epochs: 0,
        ..TrainConfig::default()
    });
    let out = awaken(&views, &mut enc, &mut cp, &mut g, &cfg, None).unwrap();
    assert!(out.trace.is_empty());
    assert_eq!(g, g_before);
    assert!(train_concept_prediction(&views, &mut enc, &mut cp, &cfg)
        .unwrap()
        .is_empty());
    assert_eq!(cp, cp_before);
}

#[test]
fn huge_learning_rate_reports_divergence_or_stays_finite() {
    let data = small_corpus(6);
    let views = weak_views(&data);
    let mut enc = MicroEncoder::new(tiny_encoder(), Vocab::build(&data)).unwrap();
    let mut cp = CpHead::zeros(16);
    let cfg = sequential(TrainConfig {
        cp_epochs: 3,
        lr: 1e300,
        ..TrainConfig::default()
    });
    match train_concept_prediction(&views, &mut enc, &mut cp, &cfg) {
        Err(EtaError::Divergence { lr, .. }) => assert_eq!(lr, 1e300),
        Err(other) => panic!("unexpected error {other}"),
        Ok(trace) => assert!(trace.iter().all(|t| t.loss.is_finite())),
    }
    let bad = TrainConfig {
        lr: 0.0,
        ..TrainConfig::default()
    };
    assert_eq!(
        train_concept_prediction(&views, &mut enc, &mut cp, &bad)
            .unwrap_err()
            .exit_code(),
        2
    );
}

#[test]
fn training_code_has_no_route_to_gold_links() {
    for (name, src) in [
        ("eta", include_str!("../src/eta.rs")),
        ("optim", include_str!("../src/optim.rs")),
        ("encoder", include_str!("../src/encoder.rs")),
    ] {
        assert!(!src.to_lowercase().contains("gold"), "{name} mentions gold links");
    }
}

#[test]
fn checkpoints_round_trip_and_report_problems() {
    let data = small_corpus(20);
    let model = train_eta(&data, &tiny_pipeline(), EncoderProbe::Trained, None)
        .unwrap()
        .model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, model);

    let opts = GroundOptions::default();
    let cache = DeltaCache::disabled();
    let pc = PairConfig::default();
    for mode in [GroundingMode::Eta, GroundingMode::DeltaSum, GroundingMode::Contrast] {
        assert_eq!(
            ground(Some(&model), &data, mode, &pc, opts, Execution::Sequential, &cache).unwrap(),
            ground(Some(&back), &data, mode, &pc, opts, Execution::Sequential, &cache).unwrap(),
        );
    }

    let missing = checkpoint::load(dir.path().join("nope.json")).unwrap_err();
    assert!(matches!(missing, EtaError::MissingArtifact(_)));
    assert_eq!(missing.exit_code(), 4);

    let text = std::fs::read_to_string(&path).unwrap();
    let bumped = text.replacen(
        &format!("\"version\":\"{}\"", checkpoint::FORMAT_VERSION),
        "\"version\":\"9.0\"",
        1,
    );
    assert_ne!(bumped, text);
    assert_eq!(checkpoint::from_json(&bumped, "bumped").unwrap_err().exit_code(), 3);
}

#[test]
fn delta_cache_and_execution_do_not_change_results() {
    let data = small_corpus(20);
    let model = train_eta(&data, &tiny_pipeline(), EncoderProbe::Trained, None)
        .unwrap()
        .model;
    let pc = PairConfig::default();
    let opts = GroundOptions {
        alpha: true,
        ..GroundOptions::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let cache = DeltaCache::at(dir.path());
    let plain = ground(
        Some(&model),
        &data,
        GroundingMode::DeltaRaw,
        &pc,
        opts,
        Execution::Sequential,
        &DeltaCache::disabled(),
    )
    .unwrap();
    let cold = ground(
        Some(&model),
        &data,
        GroundingMode::DeltaRaw,
        &pc,
        opts,
        Execution::Sequential,
        &cache,
    )
    .unwrap();
    let files = std::fs::read_dir(dir.path()).unwrap().count();
    assert!(files > 0);
    let warm = ground(
        Some(&model),
        &data,
        GroundingMode::DeltaRaw,
        &pc,
        opts,
        Execution::Parallel,
        &cache,
    )
    .unwrap();
    assert_eq!(plain, cold);
    assert_eq!(cold, warm);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), files);

    let seq = score_mode(Some(&model), &data, GroundingMode::Eta, &pc, Execution::Sequential).unwrap();
    let par = score_mode(Some(&model), &data, GroundingMode::Eta, &pc, Execution::Parallel).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn random_frozen_probe_keeps_its_encoder() {
    let data = small_corpus(10);
    let cfg = tiny_pipeline();
    let model = train_eta(&data, &cfg, EncoderProbe::RandomFrozen, None).unwrap().model;
    let fresh = MicroEncoder::new(cfg.encoder.clone(), model.encoder.vocab().clone()).unwrap();
    assert_eq!(model.encoder.fingerprint(), fresh.fingerprint());
}

#[test]
fn ngram_grounding_needs_no_model_but_others_do() {
    let data = small_corpus(5);
    let pc = PairConfig::default();
    let cache = DeltaCache::disabled();
    let recs = ground(
        None,
        &data,
        GroundingMode::Ngram,
        &pc,
        GroundOptions::default(),
        Execution::Sequential,
        &cache,
    )
    .unwrap();
    assert_eq!(recs.len(), 5);
    let err = ground(
        None,
        &data,
        GroundingMode::Eta,
        &pc,
        GroundOptions::default(),
        Execution::Sequential,
        &cache,
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 4);
}
