//! The single JSON run configuration.

use std::path::Path;

use dsm_core::baselines::bm25::{DEFAULT_B, DEFAULT_K1};
use dsm_core::baselines::lm::LmConfig;
use dsm_core::fixtures::GradCheckConfig;
use dsm_core::metrics::{ThresholdMode, DEFAULT_RELEVANT_GRADE};
use dsm_core::network::NetworkConfig;
use dsm_core::optim::Schedule;
use dsm_core::sampling::AuditConfig;
use dsm_core::synth::GeneratorConfig;
use dsm_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    /// Cutoffs for NDCG@K and precision@K.
    pub ks: Vec<usize>,
    pub relevant_grade: u8,
    pub threshold: ThresholdMode,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { ks: vec![1, 3, 5, 7], relevant_grade: DEFAULT_RELEVANT_GRADE, threshold: ThresholdMode::MaximizeOnValidation }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabOptions {
    pub min_count: u64,
}

impl Default for VocabOptions {
    fn default() -> Self {
        Self { min_count: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bm25Options {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Options {
    fn default() -> Self {
        Self { k1: DEFAULT_K1, b: DEFAULT_B }
    }
}

/// Everything a run needs. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub metrics: MetricOptions,
    pub vocab: VocabOptions,
    pub lm: LmConfig,
    pub bm25: Bm25Options,
    pub gradcheck: GradCheckConfig,
    pub sampler_audit: AuditConfig,
}

/// Training settings for the desk network on the synthetic corpus.
pub fn desk_train() -> TrainConfig {
    TrainConfig { learning_rate: 0.01, epochs: 10, schedule: Schedule::Constant, ..TrainConfig::default() }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::desk(),
            train: desk_train(),
            generator: GeneratorConfig::default(),
            metrics: MetricOptions::default(),
            vocab: VocabOptions::default(),
            lm: LmConfig::default(),
            bm25: Bm25Options::default(),
            gradcheck: GradCheckConfig::default(),
            sampler_audit: AuditConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text` over the defaults: a partial section keeps the defaults of
    /// the keys it leaves out.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !user.is_object() {
            return Err(Error::Config("run configuration must be a JSON object".into()));
        }
        let mut doc = serde_json::to_value(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut doc, user);
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// `path` when given, else the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: dsm_core::Error| Error::Config(e.to_string());
        self.network.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.generator.validate().map_err(wrap)?;
        self.lm.validate().map_err(wrap)?;
        self.gradcheck.network.validate().map_err(wrap)?;
        if self.vocab.min_count == 0 {
            return Err(Error::Config("vocab.min_count must be at least 1".into()));
        }
        if self.metrics.ks.is_empty() || self.metrics.ks.contains(&0) {
            return Err(Error::Config("metrics.ks must be a non-empty list of positive cutoffs".into()));
        }
        if self.metrics.relevant_grade > 5 {
            return Err(Error::Config("metrics.relevant_grade must be in 0..=5".into()));
        }
        if !(self.bm25.k1 >= 0.0) || !(0.0..=1.0).contains(&self.bm25.b) {
            return Err(Error::Config("bm25.k1 must be >= 0 and bm25.b in [0, 1]".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
