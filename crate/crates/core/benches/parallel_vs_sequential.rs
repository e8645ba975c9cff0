use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eta_grounding::corpus::{weak_views, GroundingInstance};
use eta_grounding::encoder::{EncoderConfig, MicroEncoder, Vocab};
use eta_grounding::eta::{erase, CpHead, GroundingHead};
use eta_grounding::grounding::PairConfig;
use eta_grounding::par::{self, Execution};
use eta_grounding::pipeline::{ground, DeltaCache, EtaModel, GroundOptions, GroundingMode, PipelineConfig};
use eta_grounding::synthetic::{generate_synthetic_corpus, SyntheticSpec};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup() -> (Vec<GroundingInstance>, EtaModel) {
    let data = generate_synthetic_corpus(&SyntheticSpec {
        questions: 48,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .instances;
    let config = PipelineConfig {
        encoder: EncoderConfig {
            layers: 2,
            ..EncoderConfig::default()
        },
        ..PipelineConfig::default()
    };
    let encoder = MicroEncoder::new(config.encoder.clone(), Vocab::build(&data)).unwrap();
    let d = config.encoder.d;
    let model = EtaModel {
        config,
        encoder,
        cp: CpHead::random(d, 1),
        grounding: GroundingHead::random(d, 2),
        contrast: None,
    };
    (data, model)
}

fn erasure_sweep(c: &mut Criterion) {
    let (data, model) = setup();
    let views = weak_views(&data);
    let mut group = c.benchmark_group("erasure_sweep");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                par::try_map(exec, &views, |v| {
                    erase(v, v.weak_labels, &model.encoder, &model.cp, Execution::Sequential).map(|e| e.delta)
                })
                .unwrap()
            })
        });
    }
    group.finish();
}

fn ground_modes(c: &mut Criterion) {
    let (data, model) = setup();
    let pc = PairConfig::default();
    let cache = DeltaCache::disabled();
    for mode in [GroundingMode::Eta, GroundingMode::DeltaSum] {
        let mut group = c.benchmark_group(format!("ground_{mode}"));
        group.sample_size(10);
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
                b.iter(|| {
                    black_box(ground(Some(&model), &data, mode, &pc, GroundOptions::default(), exec, &cache).unwrap())
                })
            });
        }
        group.finish();
    }
}

criterion_group!(benches, erasure_sweep, ground_modes);
criterion_main!(benches);
