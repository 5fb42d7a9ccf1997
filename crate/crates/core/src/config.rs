//! Run configuration: one JSON file plus dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::distiller::BackendConfig;
use crate::inference::BeamConfig;
use crate::model::ModelConfig;
use crate::task::Task;
use crate::trainer::{TaskRatio, TrainerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("config file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad override '{0}': expected key.path=value")]
    BadOverride(String),
}

impl ConfigError {
    fn at(path: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            path: path.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub reviews: PathBuf,
    pub quads: PathBuf,
    pub splits: PathBuf,
    pub vocab: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            reviews: "data/reviews.jsonl".into(),
            quads: "run/quads.jsonl".into(),
            splits: "run/splits".into(),
            vocab: "run/vocab.txt".into(),
            checkpoints: "run/checkpoints".into(),
            reports: "run/reports".into(),
        }
    }
}

/// Architecture without the vocabulary size, which comes from the built
/// vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub n_prompt_per_task: usize,
    pub whole_word_capacity: usize,
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(16);
        Self {
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_model: d.d_model,
            d_ff: d.d_ff,
            max_seq_len: d.max_seq_len,
            n_prompt_per_task: d.n_prompt_per_task,
            whole_word_capacity: d.whole_word_capacity,
            init_std: d.init_std,
        }
    }
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size,
            max_seq_len: self.max_seq_len,
            n_prompt_per_task: self.n_prompt_per_task,
            n_tasks: Task::COUNT,
            whole_word_capacity: self.whole_word_capacity,
            init_std: self.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub min_len: usize,
    pub lenient: bool,
    pub vocab_cap: usize,
    /// Seed of the explanation partition; fixed across trials.
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            min_len: 3,
            lenient: false,
            vocab_cap: 2048,
            split_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    /// TR test negatives per user.
    pub n_negatives: usize,
    /// Rank this many sampled SR candidates instead of the full universe.
    pub sr_sampled: Option<usize>,
    /// Seed of the test candidate sets; fixed across trials.
    pub seed: u64,
    /// Fail instead of warning when a TR candidate set is not 100 items.
    pub strict_candidates: bool,
    pub paired: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: crate::evaluator::DEFAULT_KS.to_vec(),
            n_negatives: 99,
            sr_sampled: None,
            seed: 0,
            strict_candidates: false,
            paired: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub ratios: TaskRatio,
    pub paths: Paths,
    pub data: DataSection,
    pub model: ModelSection,
    pub trainer: TrainerConfig,
    pub beam: BeamConfig,
    pub backend: BackendConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            threads: 1,
            ratios: TaskRatio::default(),
            paths: Paths::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            trainer: TrainerConfig::default(),
            beam: BeamConfig::default(),
            backend: BackendConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Settings for the bundled synthetic corpus: its universe is too small
    /// for 99 negatives.
    pub fn synthetic() -> Self {
        let mut c = Self::default();
        c.trainer.n_negatives = 19;
        c.eval.n_negatives = 19;
        c.trainer.lr = crate::trainer::SYNTHETIC_LR;
        c
    }

    /// Trainer settings with the run seed and top-level ratios applied.
    pub fn trainer_config(&self, seed: u64) -> TrainerConfig {
        let mut t = self.trainer.clone();
        t.seed = seed;
        t.ratios = self.ratios;
        t
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let prefixed = |section: &str, r: Result<(), (String, String)>| {
            r.map_err(|(k, m)| ConfigError::at(&format!("{section}.{k}"), m))
        };
        prefixed("trainer", self.trainer.validate())?;
        prefixed("beam", self.beam.validate())?;
        self.ratios.validate().map_err(|m| ConfigError::at("ratios", m))?;
        self.backend
            .validate()
            .map_err(|e| ConfigError::at("backend", e.to_string()))?;
        self.model
            .with_vocab(crate::textcodec::MIN_CAP)
            .validate()
            .map_err(|e| ConfigError::at("model", e.to_string()))?;
        if self.data.min_len < 3 {
            return Err(ConfigError::at("data.min_len", "must be at least 3"));
        }
        if self.data.vocab_cap < crate::textcodec::MIN_CAP {
            return Err(ConfigError::at(
                "data.vocab_cap",
                format!("must be at least {}", crate::textcodec::MIN_CAP),
            ));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(ConfigError::at("eval.ks", "must be a non-empty list of positive integers"));
        }
        if self.eval.n_negatives == 0 {
            return Err(ConfigError::at("eval.n_negatives", "must be at least 1"));
        }
        if self.eval.sr_sampled == Some(0) {
            return Err(ConfigError::at("eval.sr_sampled", "must be at least 1"));
        }
        if self.threads != 1 {
            return Err(ConfigError::at("threads", "only single-threaded training is supported"));
        }
        Ok(())
    }

    /// Parses, applies overrides, then validates. Diagnostics name the
    /// offending key by its dotted path.
    pub fn from_value(mut value: Value, overrides: &[String]) -> Result<Self, ConfigError> {
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::Invalid {
                path: if path == "." { "<root>".into() } else { path },
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::at("<root>", e.to_string()))?;
        Self::from_value(value, overrides)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, overrides)
    }

    /// Effective configuration as pretty JSON.
    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// `a.b.c=value`; `value` is read as JSON and falls back to a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    if !root.is_object() {
        return Err(ConfigError::at("<root>", "config must be a JSON object"));
    }
    let mut at = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = at
            .as_object_mut()
            .ok_or_else(|| ConfigError::at(&parts[..i].join("."), "not an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        at = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one part")
}
