#![allow(dead_code)]

use std::path::{Path, PathBuf};

use kpose::model::ModelConfig;
use kpose::synthdata::{make_dataset, DatasetConfig};
use kpose_harness::config::TrainConfig;

/// Small 16-pixel model that trains in well under a second per epoch.
pub fn tiny_model() -> ModelConfig {
    ModelConfig::tiny()
}

pub fn tiny_train_config(data: &Path, checkpoint: PathBuf) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        lr: 3e-3,
        lr_decay_every: 2,
        heldout: 4,
        checkpoint_every: 1,
        data: data.to_path_buf(),
        checkpoint,
        model: tiny_model(),
        ..TrainConfig::default()
    }
}

pub fn dataset(dir: &Path, n_train: usize, n_test: usize, seed: u64, size: usize) -> PathBuf {
    let root = dir.join(format!("data_{n_train}_{n_test}_{seed}_{size}"));
    make_dataset(&DatasetConfig { n_train, n_test, seed, angle_range: None, size }, &root).unwrap();
    root
}
