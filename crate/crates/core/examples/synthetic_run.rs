use std::time::Instant;

use eta_grounding::par::Execution;
use eta_grounding::pipeline::{score_mode, train_eta, EncoderProbe, GroundingMode, PipelineConfig};
use eta_grounding::synthetic::{generate_synthetic_corpus, SyntheticSpec};

fn main() -> eta_grounding::Result<()> {
    let spec = SyntheticSpec::default();
    let train = generate_synthetic_corpus(&spec)?;
    let dev = generate_synthetic_corpus(&spec.with_split(1, spec.questions))?;
    let cfg = PipelineConfig::default();
    for probe in [EncoderProbe::Trained, EncoderProbe::RandomFrozen] {
        let t = Instant::now();
        let out = train_eta(&train.instances, &cfg, probe, None)?;
        println!("{probe:?}: trained in {:.1}s", t.elapsed().as_secs_f64());
        for r in &out.trace {
            if r.epoch % 5 == 0 || r.accuracy.is_some_and(|a| a > 0.0) && r.epoch < 3 {
                println!(
                    "  {:?} epoch {} loss {:.4} acc {:?}",
                    r.phase, r.epoch, r.loss, r.accuracy
                );
            }
        }
        for mode in GroundingMode::ALL {
            for (name, data) in [("train", &train.instances), ("dev", &dev.instances)] {
                let r = score_mode(Some(&out.model), data, mode, &cfg.pairs, Execution::Parallel)?;
                println!(
                    "  {name:5} {:14} P {:.3} R {:.3} F {:.3}",
                    mode.name(),
                    r.overall.precision,
                    r.overall.recall,
                    r.overall.f1
                );
            }
        }
    }
    Ok(())
}
