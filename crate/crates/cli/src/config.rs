//! Run configuration: defaults, then a TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use eta_grounding::eta::{FineTune, Refresh};
use eta_grounding::par::Execution;
use eta_grounding::pipeline::PipelineConfig;
use eta_grounding::{EtaError, Result};
use serde::{Deserialize, Serialize};

/// File name of the resolved snapshot written next to every run's outputs.
pub const SNAPSHOT: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train_data: Option<PathBuf>,
    pub dev_data: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every core. Only 1 is bit-deterministic.
    pub workers: usize,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train_data: None,
            dev_data: None,
            output_dir: PathBuf::from("runs/latest"),
            workers: 0,
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Flag values that override the file; `None` leaves the file value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub train_data: Option<PathBuf>,
    pub dev_data: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub head_lr: Option<f64>,
    pub cp_epochs: Option<usize>,
    pub awaken_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub refresh: Option<Refresh>,
    pub finetune: Option<FineTune>,
    pub tau: Option<f64>,
    pub no_contrast: bool,
}

fn config_err(field: &str, message: impl Into<String>) -> EtaError {
    EtaError::config(field, message)
}

/// Dotted paths present in `given` but absent from `known`.
fn unknown_keys(given: &toml::Value, known: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    if let (toml::Value::Table(g), toml::Value::Table(k)) = (given, known) {
        for (key, v) in g {
            let path = if prefix.is_empty() {
                key.clone()
            } else {
                format!("{prefix}.{key}")
            };
            match k.get(key) {
                Some(kv) => unknown_keys(v, kv, &path, out),
                None => out.push(path),
            }
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err("config", e.message().to_string()))?;
        let given: toml::Value = toml::from_str(text).map_err(|e| config_err("config", e.message().to_string()))?;
        let known = toml::Value::try_from(&cfg).map_err(|e| config_err("config", e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&given, &known, "", &mut unknown);
        if let Some(first) = unknown.first() {
            return Err(config_err(first, "unknown key"));
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => EtaError::MissingArtifact(format!("config file {}", p.display())),
                    _ => EtaError::io(p, e),
                })?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(v) = &o.train_data {
            self.train_data = Some(v.clone());
        }
        if let Some(v) = &o.dev_data {
            self.dev_data = Some(v.clone());
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.workers {
            self.workers = v;
        }
        if let Some(seed) = o.seed {
            self.pipeline = self.pipeline.with_seed(seed);
        }
        let t = &mut self.pipeline.train;
        if let Some(v) = o.lr {
            t.lr = v;
        }
        if let Some(v) = o.head_lr {
            t.head_lr = v;
        }
        if let Some(v) = o.cp_epochs {
            t.cp_epochs = v;
        }
        if let Some(v) = o.awaken_epochs {
            t.awaken_epochs = v;
        }
        if let Some(v) = o.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = o.refresh {
            t.refresh = v;
        }
        if let Some(v) = o.finetune {
            t.finetune = v;
        }
        if let Some(v) = o.tau {
            self.pipeline.pairs.tau = v;
        }
        if o.no_contrast {
            self.pipeline.train_contrast = false;
        }
        let exec = self.execution();
        self.pipeline = self.pipeline.with_execution(exec);
        self
    }

    pub fn execution(&self) -> Execution {
        if self.workers == 0 {
            Execution::Parallel
        } else {
            Execution::from_workers(self.workers)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config_err("config", e.to_string()))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(SNAPSHOT);
        std::fs::write(&path, self.to_toml()?).map_err(|e| EtaError::io(&path, e))?;
        Ok(path)
    }
}
