use kpose::model::{Model, ModelConfig};

use crate::error::Result;

/// Multiply-accumulates of one inference forward, in units of 10⁹.
pub fn count_macs(cfg: &ModelConfig) -> Result<f64> {
    Ok(Model::new(cfg.clone())?.inference_macs() as f64 / 1e9)
}
