use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthworld::NoiseConfig;

/// Everything a training run depends on besides the dataset. Serialized as
/// one JSON document; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    /// Observation noise used for training and evaluation windows.
    pub noise: NoiseConfig,
    pub eval_every: usize,
    /// The last this-many dataset sequences are held out for evaluation.
    pub eval_sequences: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 4,
            optimizer: OptimizerConfig::default(),
            model: ModelConfig::default(),
            noise: NoiseConfig::default(),
            eval_every: 200,
            eval_sequences: 32,
            checkpoint_every: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return bad("eval_every and checkpoint_every must be >= 1");
        }
        if self.eval_sequences == 0 {
            return bad("eval_sequences must be >= 1");
        }
        self.optimizer.validate()?;
        self.noise.validate()?;
        self.model.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// JSON schema of [`TrainConfig`], as published in `crates/core/schemas/`.
pub const TRAIN_CONFIG_SCHEMA: &str = include_str!("../../schemas/train_config.schema.json");
