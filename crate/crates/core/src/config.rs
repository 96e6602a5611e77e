//! Run configuration: a single TOML file with one section per pipeline
//! stage, plus the canonical hashing used to stamp outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::EnvConfig;
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::score::{ScoreConfig, ScoreError, ScoreVariant};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// `[score]` section: the variant used for RTG modeling; the CPA limit is
/// shared with the environment.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreSection {
    pub variant: ScoreVariant,
}

impl Default for ScoreSection {
    fn default() -> Self {
        Self {
            variant: ScoreVariant::S2,
        }
    }
}

/// `[dataset]` section: generation volume and window context length.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub episodes: usize,
    /// Context length M; training windows span M+1 steps.
    pub context: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            episodes: 40,
            context: 19,
        }
    }
}

/// The full run configuration. Every field has a default, so a config file
/// only needs to state what it changes.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub score: ScoreSection,
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    pub fn score_config(&self) -> Result<ScoreConfig, ConfigError> {
        Ok(ScoreConfig::new(self.env.cpa_limit, self.score.variant)?)
    }
}

/// Hex SHA-256 of the canonical JSON form of any serializable value.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config types serialize infallibly");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
