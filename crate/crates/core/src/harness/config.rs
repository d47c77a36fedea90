//! Run configuration: JSON with strict unknown-key rejection, named presets,
//! and range validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::rng::substream;
use crate::sparsify::SparsifyConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown preset {name:?}; available: {available:?}")]
    UnknownPreset {
        name: String,
        available: Vec<&'static str>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum BackendConfig {
    #[default]
    Dense,
    Blockwise {
        block_size: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticWorkload {
    pub num_sequences: usize,
    pub l_v: usize,
    pub pre_text_len: usize,
    pub question_len: usize,
    pub seed: Option<u64>,
}

impl Default for SyntheticWorkload {
    fn default() -> Self {
        Self {
            num_sequences: 1,
            l_v: 64,
            pre_text_len: 4,
            question_len: 12,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileWorkload {
    pub path: PathBuf,
    #[serde(default = "default_pre_text_len")]
    pub pre_text_len: usize,
    #[serde(default = "default_question_len")]
    pub question_len: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_pre_text_len() -> usize {
    4
}

fn default_question_len() -> usize {
    12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum WorkloadConfig {
    Synthetic(SyntheticWorkload),
    File(FileWorkload),
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self::Synthetic(SyntheticWorkload::default())
    }
}

/// Full benchmark run description. Any field can be omitted; a config of just
/// `{"seed": 1}` runs the default toy model on the default synthetic
/// workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Convenience seed: when set it overrides the model seed and derives the
    /// workload seed.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub sparsify: SparsifyConfig,
    pub workload: WorkloadConfig,
    pub attention_backend: BackendConfig,
    pub report_path: Option<PathBuf>,
    pub measure_time: bool,
    pub repetitions: usize,
    /// Also run a no-pruning baseline per sequence, for instrumented
    /// comparisons and speedups.
    pub include_baseline: bool,
    /// Worker threads for sequence-level parallelism; default is whatever
    /// the runtime offers.
    pub workers: Option<usize>,
    /// Bytes per cache element for the KV-cache size proxy.
    pub cache_bytes_per_element: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            model: ModelConfig::default(),
            sparsify: SparsifyConfig::default(),
            workload: WorkloadConfig::default(),
            attention_backend: BackendConfig::default(),
            report_path: None,
            measure_time: false,
            repetitions: 1,
            include_baseline: true,
            workers: None,
            cache_bytes_per_element: 2,
        }
    }
}

const WORKLOAD_SEED_STREAM: u64 = 0x77_6b;

impl RunConfig {
    /// Apply the convenience seed and fill derived defaults, then validate.
    pub fn resolve(mut self) -> Result<RunConfig, ConfigError> {
        if let Some(seed) = self.seed {
            self.model.seed = seed;
            let derived = substream(seed, WORKLOAD_SEED_STREAM, 0);
            match &mut self.workload {
                WorkloadConfig::Synthetic(w) => w.seed = Some(w.seed.unwrap_or(derived)),
                WorkloadConfig::File(w) => w.seed = Some(w.seed.unwrap_or(derived)),
            }
        } else {
            match &mut self.workload {
                WorkloadConfig::Synthetic(w) => w.seed = Some(w.seed.unwrap_or(self.model.seed)),
                WorkloadConfig::File(w) => w.seed = Some(w.seed.unwrap_or(self.model.seed)),
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let s = &self.sparsify;
        if !(s.lambda >= 0.0 && s.lambda.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "lambda out of [0, inf): {}",
                s.lambda
            )));
        }
        if !(0.0..=1.0).contains(&s.tau) {
            return Err(ConfigError::Invalid(format!("tau out of [0,1]: {}", s.tau)));
        }
        if !(s.theta > 0.0 && s.theta <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "theta out of (0,1]: {}",
                s.theta
            )));
        }
        if s.knn_k == 0 {
            return Err(ConfigError::Invalid("knn_k must be at least 1".into()));
        }
        if !(s.rank_rel_tol > 0.0 && s.rank_rel_tol.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "rank_rel_tol out of (0, inf): {}",
                s.rank_rel_tol
            )));
        }
        if let Some(layers) = &s.active_layers {
            for &l in layers {
                if l >= self.model.num_layers {
                    return Err(ConfigError::Invalid(format!(
                        "active layer {l} out of range for {} layers",
                        self.model.num_layers
                    )));
                }
            }
        }
        if self.repetitions == 0 {
            return Err(ConfigError::Invalid(
                "repetitions must be at least 1".into(),
            ));
        }
        if let BackendConfig::Blockwise { block_size } = self.attention_backend {
            if block_size == 0 {
                return Err(ConfigError::Invalid("block_size must be at least 1".into()));
            }
        }
        if let Some(workers) = self.workers {
            if workers == 0 {
                return Err(ConfigError::Invalid("workers must be at least 1".into()));
            }
        }
        if self.cache_bytes_per_element == 0 {
            return Err(ConfigError::Invalid(
                "cache_bytes_per_element must be at least 1".into(),
            ));
        }
        match &self.workload {
            WorkloadConfig::Synthetic(w) => {
                if w.num_sequences == 0 {
                    return Err(ConfigError::Invalid(
                        "num_sequences must be at least 1".into(),
                    ));
                }
                if w.l_v == 0 {
                    return Err(ConfigError::Invalid("l_v must be at least 1".into()));
                }
                if w.question_len == 0 {
                    return Err(ConfigError::Invalid(
                        "question_len must be at least 1".into(),
                    ));
                }
                if let Some(budget) = s.budget {
                    if budget == 0 || budget > w.l_v {
                        return Err(ConfigError::Invalid(format!(
                            "budget {budget} out of [1, l_v={}]",
                            w.l_v
                        )));
                    }
                }
            }
            WorkloadConfig::File(w) => {
                if w.question_len == 0 {
                    return Err(ConfigError::Invalid(
                        "question_len must be at least 1".into(),
                    ));
                }
                // Budget against the file's visual lengths is checked at load.
            }
        }
        Ok(())
    }

    pub fn workload_seed(&self) -> u64 {
        match &self.workload {
            WorkloadConfig::Synthetic(w) => w.seed.unwrap_or(self.model.seed),
            WorkloadConfig::File(w) => w.seed.unwrap_or(self.model.seed),
        }
    }
}

pub fn parse_config(text: &str, origin: &Path) -> Result<RunConfig, ConfigError> {
    let config: RunConfig = serde_json::from_str(text).map_err(|source| ConfigError::Parse {
        path: origin.to_path_buf(),
        source,
    })?;
    config.resolve()
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, path)
}

const PRESETS: &[(&str, &str)] = &[
    ("retain192", include_str!("../../presets/retain192.json")),
    ("retain128", include_str!("../../presets/retain128.json")),
    ("retain64", include_str!("../../presets/retain64.json")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(name, _)| *name).collect()
}

/// Load a named preset shipped with the binary (also present as JSON files
/// under `presets/`).
pub fn load_preset(name: &str) -> Result<RunConfig, ConfigError> {
    let Some((_, text)) = PRESETS.iter().find(|(n, _)| *n == name) else {
        return Err(ConfigError::UnknownPreset {
            name: name.to_string(),
            available: preset_names(),
        });
    };
    parse_config(text, Path::new(name))
}
