use std::io::Write;
use std::path::Path;
use std::time::Instant;

use engine::Graph;
use kpose::model::{LossValues, Mode, Model};
use kpose::nn::{Bound, ParamStore};
use kpose::synthdata::{Dataset, SamplePair, Split};
use kpose::CoreError;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::adam::{adam_step, AdamHyper, AdamState};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{io_err, HarnessError, Result};
use crate::eval::evaluate_samples;

/// Loads a whole split into memory, in manifest order.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<SamplePair>> {
    let ds = Dataset::open(root, split)?;
    Ok((0..ds.len()).into_par_iter().map(|i| ds.get(i, false)).collect::<Result<Vec<_>, _>>()?)
}

type SampleGradient = (ParamStore<f32>, LossValues);

/// Mean loss gradient over the usable samples of a batch.
pub struct BatchGradient {
    pub grads: ParamStore<f32>,
    pub losses: LossValues,
    pub used: usize,
    pub skipped: usize,
}

/// Mean gradient of `L_total` over a batch. Per-sample graphs run in parallel;
/// the reduction runs in batch order so the result does not depend on thread count.
/// Samples whose pose solve is rank-deficient are skipped and counted.
pub fn batch_gradient(
    model: &Model,
    params: &ParamStore<f32>,
    batch: &[&SamplePair],
    kp_seeds: &[u64],
    step: u64,
) -> Result<BatchGradient> {
    let per_sample: Vec<Result<Option<SampleGradient>>> = batch
        .par_iter()
        .zip(kp_seeds)
        .map(|(sample, &seed)| {
            let g = Graph::<f32>::new();
            let p = Bound::new(&g, params, true);
            let out = match model.forward_pair(&p, sample, Mode::Train, seed) {
                Ok(out) => out,
                Err(e) if e.is_degenerate() => return Ok(None),
                Err(CoreError::NonFiniteLoss { component, value }) => {
                    return Err(HarnessError::NonFiniteLoss { component, value, step })
                }
                Err(e) => return Err(e.into()),
            };
            let losses = out.losses.expect("training forward computes losses");
            let values = losses.values();
            let grads = g.backward(losses.total).map_err(CoreError::from)?;
            Ok(Some((p.gradients(&grads), values)))
        })
        .collect();

    let mut sum = params.zeros_like();
    let mut losses = LossValues::default();
    let (mut used, mut skipped) = (0, 0);
    for r in per_sample {
        let Some((g, l)) = r? else {
            skipped += 1;
            continue;
        };
        for ((_, acc), (_, gi)) in sum.iter_mut().zip(g.iter()) {
            for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
        losses.add_scaled(&l, 1.0);
        used += 1;
    }
    if used == 0 {
        return Err(HarnessError::DegenerateBatch { step });
    }
    let inv = 1.0 / used as f64;
    for (_, t) in sum.iter_mut() {
        for v in t.data_mut() {
            *v = (*v as f64 * inv) as f32;
        }
    }
    let mut mean = LossValues::default();
    mean.add_scaled(&losses, inv);
    Ok(BatchGradient { grads: sum, losses: mean, used, skipped })
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step { epoch: usize, step: u64, lr: f64, loss: LossValues, skipped: usize, wall_ms: u64 },
    Epoch { epoch: usize, step: u64, lr: f64, loss: LossValues, heldout_mae_deg: Option<f64>, skipped: usize, wall_ms: u64 },
}

/// Owns the parameters, optimizer state and the RNG that drives shuffling and keypoint sampling.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone())?;
        let params = model.init_params::<f32>(config.seed)?;
        let adam = AdamState::new(&params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { config, model, params, adam, rng, epoch: 0, step: 0 })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        let model = Model::new(ck.config.model.clone())?;
        let fresh = model.init_params::<f32>(0)?;
        if !fresh.same_layout(&ck.params) {
            return Err(HarnessError::Checkpoint {
                path: ck.config.checkpoint.display().to_string(),
                msg: "parameter layout does not match the stored configuration".into(),
            });
        }
        Ok(Self { config: ck.config, model, params: ck.params, adam: ck.adam, rng: ck.rng, epoch: ck.epoch, step: ck.step })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
        }
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper { beta1: self.config.beta1, beta2: self.config.beta2, eps: self.config.adam_eps }
    }

    /// One pass over `train` in a freshly shuffled order.
    pub fn run_epoch(&mut self, train: &[SamplePair], heldout: &[SamplePair], log: &mut dyn Write) -> Result<LogRecord> {
        if train.is_empty() {
            return Err(HarnessError::Data("empty training split".into()));
        }
        let start = Instant::now();
        let lr = self.config.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = LossValues::default();
        let mut batches = 0usize;
        let mut skipped = 0usize;
        let hyper = self.hyper();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&SamplePair> = chunk.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> = chunk.iter().map(|_| self.rng.gen()).collect();
            let step = self.step + 1;
            let bg = batch_gradient(&self.model, &self.params, &batch, &seeds, step)?;
            adam_step(&mut self.params, &bg.grads, &mut self.adam, lr, &hyper)?;
            self.step = step;
            total.add_scaled(&bg.losses, 1.0);
            batches += 1;
            skipped += bg.skipped;
            write_record(
                log,
                &LogRecord::Step {
                    epoch: self.epoch + 1,
                    step,
                    lr,
                    loss: bg.losses,
                    skipped: bg.skipped,
                    wall_ms: start.elapsed().as_millis() as u64,
                },
            )?;
        }
        let mut mean = LossValues::default();
        mean.add_scaled(&total, 1.0 / batches as f64);
        let heldout_mae_deg = if heldout.is_empty() {
            None
        } else {
            Some(evaluate_samples(&self.model, &self.params, heldout)?.metrics.mae_deg)
        };
        self.epoch += 1;
        let record = LogRecord::Epoch {
            epoch: self.epoch,
            step: self.step,
            lr,
            loss: mean,
            heldout_mae_deg,
            skipped,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        write_record(log, &record)?;
        Ok(record)
    }

    /// Trains until `config.epochs` epochs are complete, checkpointing periodically and at the end.
    pub fn run(&mut self, train: &[SamplePair], heldout: &[SamplePair], log: &mut dyn Write) -> Result<Vec<LogRecord>> {
        let mut records = Vec::new();
        while self.epoch < self.config.epochs {
            records.push(self.run_epoch(train, heldout, log)?);
            let last = self.epoch == self.config.epochs;
            if !self.config.checkpoint.as_os_str().is_empty() && (last || self.epoch.is_multiple_of(self.config.checkpoint_every)) {
                self.checkpoint().save(&self.config.checkpoint)?;
            }
        }
        Ok(records)
    }
}

fn write_record(log: &mut dyn Write, record: &LogRecord) -> Result<()> {
    let line = serde_json::to_string(record)?;
    writeln!(log, "{line}").map_err(io_err(Path::new("<log>")))
}

/// Loads the dataset named in `config`, trains from scratch (or from `resume`) and returns the final state.
pub fn train(config: TrainConfig, resume: Option<Checkpoint>, log: &mut dyn Write) -> Result<Checkpoint> {
    let mut trainer = match resume {
        Some(ck) => {
            let epochs = config.epochs;
            let mut t = Trainer::from_checkpoint(ck)?;
            t.config.epochs = epochs;
            t.config.checkpoint = config.checkpoint.clone();
            t
        }
        None => Trainer::new(config)?,
    };
    let train = load_split(&trainer.config.data, Split::Train)?;
    let test = load_split(&trainer.config.data, Split::Test)?;
    let n = trainer.config.heldout.min(test.len());
    trainer.run(&train, &test[..n], log)?;
    Ok(trainer.checkpoint())
}
