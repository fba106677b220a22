use std::path::{Path, PathBuf};

use kpose::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

/// Everything a training run depends on. Serialises flat, model fields included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Test pairs scored after every epoch for the log.
    pub heldout: usize,
    pub checkpoint_every: usize,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr: 2e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 30,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            heldout: 32,
            checkpoint_every: 5,
            data: PathBuf::new(),
            checkpoint: PathBuf::new(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(HarnessError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(HarnessError::Config(format!("lr_decay_factor must lie in (0, 1], got {}", self.lr_decay_factor)));
        }
        if self.batch_size == 0 || self.lr_decay_every == 0 || self.checkpoint_every == 0 {
            return Err(HarnessError::Config("batch_size, lr_decay_every and checkpoint_every must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return Err(HarnessError::Config("Adam needs β₁, β₂ in [0, 1) and ε > 0".into()));
        }
        self.model.validate()?;
        Ok(())
    }

    /// Learning rate during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}
