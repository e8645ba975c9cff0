//! `eta`: train, ground, evaluate, export, ablate, visualize and synthesize.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 data mismatch, 4 missing
//! artifact, 5 training divergence.

mod config;
mod viz;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eta_grounding::checkpoint;
use eta_grounding::corpus::{
    load_dataset, read_linking_gold, write_dataset, write_linking_gold, ConceptKind, EntityTuple, GroundingInstance,
    LinkTuples, LinkingGold, SchemaTuple, Span,
};
use eta_grounding::eval::{evaluate, Regime};
use eta_grounding::grounding::{merge_spans, read_predictions, write_predictions, FusionMode, ENTITY_TAU};
use eta_grounding::pipeline::{
    ablate, comparison_table, dataset_regime, ground, predicted_links, reference_links, train_eta, tune_contrast_tau,
    AblationProbe, DeltaCache, DevMonitor, EncoderProbe, GroundOptions, GroundingMode,
};
use eta_grounding::synthetic::{generate_synthetic_corpus, SyntheticSpec};
use eta_grounding::{EtaError, Result};
use serde::de::DeserializeOwned;

use crate::config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "eta", version, about = "Weakly supervised token-to-concept grounding")]
struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Runs are bit-reproducible only with 1.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Concept prediction then awakening; writes checkpoint, trace and config snapshot.
    Train(TrainArgs),
    /// Produce grounding pairs for a dataset.
    Ground(GroundArgs),
    /// Score predictions against reference links.
    Evaluate(EvaluateArgs),
    /// Write one-hot grounding matrices (and optional fused representations).
    Export(ExportArgs),
    /// Run a paired experiment and print a side-by-side report.
    Ablate(AblateArgs),
    /// Render the latent grounding of one instance.
    Visualize(VisualizeArgs),
    /// Generate a synthetic corpus with planted links.
    Synth(SynthArgs),
}

#[derive(Args, Clone, Default)]
struct TrainOpts {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    head_lr: Option<f64>,
    #[arg(long)]
    cp_epochs: Option<usize>,
    #[arg(long)]
    awaken_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// `every_epoch` or `once`.
    #[arg(long)]
    refresh: Option<String>,
    /// `frozen` or `joint`.
    #[arg(long)]
    finetune: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// Skip training the contrastive baseline.
    #[arg(long)]
    no_contrast: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct GroundArgs {
    /// Not needed for `ngram`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// eta, delta_raw, delta_softmax, delta_sum, ngram, sim or contrast.
    #[arg(long, default_value = "eta")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    /// Include the latent grounding matrix in each record.
    #[arg(long)]
    alpha: bool,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    p_gate: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Linking-gold JSON-lines, or a dataset whose instances carry gold_links.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    /// `schema` or `entity`; inferred from a dataset gold file when omitted.
    #[arg(long)]
    regime: Option<String>,
    /// Directory for report.json and report.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also emit schema-aware representations: `concat` or `add`.
    #[arg(long)]
    fusion: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// random_encoder, refresh_once or delta_modes.
    #[arg(long)]
    probe: String,
}

#[derive(Args)]
struct VisualizeArgs {
    /// Predictions written with `ground --alpha`.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    id: String,
    /// SVG path; a text grid is written next to it with a .txt extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML generator spec; flags override its values.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write linking-gold JSON-lines here.
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long)]
    questions: Option<usize>,
    #[arg(long)]
    concepts: Option<usize>,
    /// Question stream; splits share one concept inventory.
    #[arg(long)]
    split: Option<u64>,
}

fn parse_name<T: DeserializeOwned>(field: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| EtaError::config(field, format!("unknown value `{value}`")))
}

fn resolve(opts: &TrainOpts, cli: &Cli) -> Result<RunConfig> {
    let overrides = Overrides {
        train_data: opts.train.clone(),
        dev_data: opts.dev.clone(),
        output_dir: opts.out.clone(),
        workers: cli.workers,
        seed: cli.seed,
        lr: opts.lr,
        head_lr: opts.head_lr,
        cp_epochs: opts.cp_epochs,
        awaken_epochs: opts.awaken_epochs,
        batch_size: opts.batch_size,
        refresh: opts.refresh.as_deref().map(|s| parse_name("refresh", s)).transpose()?,
        finetune: opts
            .finetune
            .as_deref()
            .map(|s| parse_name("finetune", s))
            .transpose()?,
        tau: opts.tau,
        no_contrast: opts.no_contrast,
    };
    let cfg = RunConfig::load(opts.config.as_deref())?.apply(&overrides);
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(workers: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = workers.filter(|&n| n > 1) {
        // a second call fails harmlessly when the pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| EtaError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| EtaError::io(path, e))
}

fn cmd_train(args: &TrainArgs, cli: &Cli) -> Result<()> {
    let cfg = resolve(&args.opts, cli)?;
    let train_path = cfg
        .train_data
        .clone()
        .ok_or_else(|| EtaError::config("train_data", "no training dataset given (--train or config)"))?;
    let train = load_dataset(&train_path)?;
    let dev = cfg.dev_data.as_ref().map(load_dataset).transpose()?;
    let dev_gold = match &dev {
        Some(d) if d.iter().all(|q| q.gold_links().is_some()) => Some(reference_links(d, dataset_regime(d))?),
        _ => None,
    };
    let monitor = match (&dev, &dev_gold) {
        (Some(d), Some(g)) => Some(DevMonitor {
            data: d,
            gold: g,
            regime: dataset_regime(d),
        }),
        _ => None,
    };

    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    cfg.persist(&out)?;
    eprintln!("training on {} instances from {}", train.len(), train_path.display());
    let mut outcome = train_eta(&train, &cfg.pipeline, EncoderProbe::Trained, monitor)?;
    if let (Some(d), Some(_), true) = (&dev, &dev_gold, outcome.model.contrast.is_some()) {
        let tau = tune_contrast_tau(&mut outcome.model, d, cfg.execution())?;
        eprintln!("contrast pair threshold tuned on dev: {tau}");
    }

    checkpoint::save(&outcome.model, out.join("model.json"))?;
    let mut trace = String::new();
    for r in &outcome.trace {
        trace.push_str(&serde_json::to_string(r)?);
        trace.push('\n');
    }
    write_text(&out.join("trace.jsonl"), &trace)?;
    if let Some(last) = outcome.trace.iter().rev().find(|r| r.f1.is_some()) {
        eprintln!("final dev F1 {:.4}", last.f1.unwrap_or_default());
    }
    println!("{}", out.join("model.json").display());
    Ok(())
}

fn cmd_ground(args: &GroundArgs, cli: &Cli) -> Result<()> {
    let mode: GroundingMode = args.mode.parse()?;
    let data = load_dataset(&args.data)?;
    let model = match &args.checkpoint {
        Some(p) => Some(checkpoint::load(p)?),
        None if mode.needs_model() => {
            return Err(EtaError::MissingArtifact(format!("mode `{mode}` needs --checkpoint")));
        }
        None => None,
    };
    let regime = dataset_regime(&data);
    let mut pairs = model.as_ref().map(|m| m.config.pairs).unwrap_or_default();
    pairs.tau = args.tau.unwrap_or(match regime {
        Regime::Entity => ENTITY_TAU,
        Regime::Schema => pairs.tau,
    });
    if let Some(g) = args.p_gate {
        pairs.p_gate = g;
    }
    let exec = RunConfig {
        workers: cli.workers.unwrap_or(0),
        ..RunConfig::default()
    }
    .execution();
    let opts = GroundOptions {
        alpha: args.alpha,
        ..Default::default()
    };
    let records = ground(model.as_ref(), &data, mode, &pairs, opts, exec, &DeltaCache::from_env())?;
    write_predictions(&args.out, &records)?;
    eprintln!("{} records ({mode}) -> {}", records.len(), args.out.display());
    Ok(())
}

/// Gold links either from a linking-gold file or from a dataset's annotations.
/// Gold links plus, when `path` is a dataset, the instances they came from.
fn load_gold(
    path: &Path,
    regime: Option<Regime>,
) -> Result<(Vec<LinkingGold>, Regime, Option<Vec<GroundingInstance>>)> {
    if let Ok(g) = read_linking_gold(path) {
        let inferred = match g.first().map(|x| &x.tuples) {
            Some(LinkTuples::Entity(_)) => Regime::Entity,
            _ => Regime::Schema,
        };
        return Ok((g, regime.unwrap_or(inferred), None));
    }
    let data = load_dataset(path)?;
    let regime = regime.unwrap_or_else(|| dataset_regime(&data));
    Ok((reference_links(&data, regime)?, regime, Some(data)))
}

fn records_to_links(
    records: &[eta_grounding::grounding::PredictionRecord],
    gold: &[LinkingGold],
    regime: Regime,
) -> Result<Vec<LinkingGold>> {
    let mut kinds: HashMap<&str, ConceptKind> = HashMap::new();
    for g in gold {
        if let LinkTuples::Schema(ts) = &g.tuples {
            for t in ts {
                kinds.insert(t.concept.as_str(), t.kind);
            }
        }
    }
    records
        .iter()
        .map(|r| {
            let tuples = match regime {
                Regime::Schema => LinkTuples::Schema(
                    r.pairs
                        .iter()
                        .map(|p| SchemaTuple {
                            concept: p.concept_id.clone(),
                            token: p.token_index,
                            kind: kinds.get(p.concept_id.as_str()).copied().unwrap_or(ConceptKind::Other),
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

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let regime = args
        .regime
        .as_deref()
        .map(|s| parse_name::<Regime>("regime", s))
        .transpose()?;
    let (gold, regime, data) = load_gold(&args.gold, regime)?;
    let records = read_predictions(&args.predictions)?;
    let pred = match &data {
        Some(d) => predicted_links(&records, d, regime)?,
        None => records_to_links(&records, &gold, regime)?,
    };
    let report = evaluate(regime, &gold, &pred)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_text(&dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
        write_text(&dir.join("report.txt"), &table)?;
    }
    Ok(())
}

fn cmd_export(args: &ExportArgs, cli: &Cli) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    let fusion = args
        .fusion
        .as_deref()
        .map(|s| parse_name::<FusionMode>("fusion", s))
        .transpose()?;
    let exec = RunConfig {
        workers: cli.workers.unwrap_or(0),
        ..RunConfig::default()
    }
    .execution();
    let opts = GroundOptions {
        alpha: false,
        one_hot: true,
        fusion,
    };
    let records = ground(
        Some(&model),
        &data,
        GroundingMode::Eta,
        &model.config.pairs,
        opts,
        exec,
        &DeltaCache::disabled(),
    )?;
    write_predictions(&args.out, &records)?;
    eprintln!("{} records -> {}", records.len(), args.out.display());
    Ok(())
}

fn cmd_ablate(args: &AblateArgs, cli: &Cli) -> Result<()> {
    let probe: AblationProbe = args.probe.parse()?;
    let cfg = resolve(&args.opts, cli)?;
    let train_path = cfg
        .train_data
        .clone()
        .ok_or_else(|| EtaError::config("train_data", "no training dataset given (--train or config)"))?;
    let train = load_dataset(&train_path)?;
    let eval_set = match &cfg.dev_data {
        Some(p) => load_dataset(p)?,
        None => train.clone(),
    };
    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    cfg.persist(&out)?;
    let rows = ablate(&train, &eval_set, &cfg.pipeline, probe)?;
    let table = comparison_table(&rows);
    print!("{table}");
    write_text(&out.join("ablation.txt"), &table)?;
    let json: Vec<_> = rows
        .iter()
        .map(|(name, r)| serde_json::json!({ "system": name, "report": r }))
        .collect();
    write_text(&out.join("ablation.json"), &serde_json::to_string_pretty(&json)?)?;
    Ok(())
}

fn cmd_visualize(args: &VisualizeArgs) -> Result<()> {
    let records = read_predictions(&args.predictions)?;
    let rec = records
        .iter()
        .find(|r| r.id == args.id)
        .ok_or_else(|| EtaError::Validation(format!("no record with id `{}`", args.id)))?;
    let missing = || EtaError::MissingArtifact(format!("record `{}` has no alpha; rerun ground with --alpha", rec.id));
    let alpha = rec.alpha.as_ref().ok_or_else(missing)?;
    let tokens = rec.question_tokens.as_ref().ok_or_else(missing)?;
    let concepts = rec.concepts.as_ref().ok_or_else(missing)?;
    let title = format!("{} ({})", rec.id, rec.system.as_deref().unwrap_or("eta"));
    let map = viz::Heatmap::new(&title, tokens, concepts, alpha)?;
    write_text(&args.out, &map.svg())?;
    let grid = args.out.with_extension("txt");
    write_text(&grid, &map.text_grid())?;
    println!("{}\n{}", args.out.display(), grid.display());
    Ok(())
}

fn cmd_synth(args: &SynthArgs, cli: &Cli) -> Result<()> {
    let mut spec: SyntheticSpec = match &args.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| EtaError::io(p, e))?;
            toml::from_str(&text).map_err(|e| EtaError::config("spec", e.message().to_string()))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    if let Some(q) = args.questions {
        spec.questions = q;
    }
    if let Some(k) = args.concepts {
        spec.concepts = k;
    }
    if let Some(s) = args.split {
        spec.split = s;
    }
    let corpus = generate_synthetic_corpus(&spec).map_err(|e| match e {
        EtaError::Validation(m) => EtaError::config("spec", m),
        other => other,
    })?;
    write_dataset(&args.out, &corpus.instances)?;
    if let Some(g) = &args.gold {
        write_linking_gold(g, &corpus.gold)?;
    }
    eprintln!("{} instances -> {}", corpus.instances.len(), args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    init_threads(cli.workers);
    match &cli.command {
        Command::Train(a) => cmd_train(a, cli),
        Command::Ground(a) => cmd_ground(a, cli),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Export(a) => cmd_export(a, cli),
        Command::Ablate(a) => cmd_ablate(a, cli),
        Command::Visualize(a) => cmd_visualize(a),
        Command::Synth(a) => cmd_synth(a, cli),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
