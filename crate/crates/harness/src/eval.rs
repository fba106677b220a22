use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use engine::{Graph, Tensor};
use kpose::model::{Correspondences, Mode, Model, ModelConfig};
use kpose::nn::{Bound, ParamStore};
use kpose::so3::{compute_metrics, geodesic_angle_deg, random_rotation, MetricsReport, Rotation};
use kpose::synthdata::{make_object, render, Dataset, SamplePair, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{io_err, HarnessError, Result};
use crate::train::load_split;

/// Strict accuracy thresholds in degrees.
pub const THRESHOLDS_DEG: [f64; 2] = [30.0, 15.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// `model`, `oracle`, `identity`, `random` or a caller-chosen label.
    pub kind: String,
    pub metrics: MetricsReport,
    pub errors_deg: Vec<f64>,
    pub fingerprint: String,
    /// Samples whose pose solve was rank-deficient; scored as the identity.
    pub degenerate: usize,
    pub wall_ms: u64,
}

impl EvalReport {
    fn build(kind: &str, errors_deg: Vec<f64>, fingerprint: String, degenerate: usize, start: Instant) -> Result<Self> {
        Ok(Self {
            kind: kind.into(),
            metrics: compute_metrics(&errors_deg, THRESHOLDS_DEG)?,
            errors_deg,
            fingerprint,
            degenerate,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// Equality of everything except wall-clock time, bit for bit.
    pub fn same_result(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.kind == other.kind
            && self.fingerprint == other.fingerprint
            && self.degenerate == other.degenerate
            && bits(&self.errors_deg) == bits(&other.errors_deg)
            && bits(&[self.metrics.mae_deg, self.metrics.acc30, self.metrics.acc15])
                == bits(&[other.metrics.mae_deg, other.metrics.acc30, other.metrics.acc15])
    }

    /// Human-readable one-liner with degrees at 0.1 precision.
    pub fn summary(&self) -> String {
        let m = &self.metrics;
        format!(
            "{}: n={} mAE={:.1}° Acc@30={:.1}% Acc@15={:.1}% degenerate={}",
            self.kind,
            m.n,
            m.mae_deg,
            100.0 * m.acc30,
            100.0 * m.acc15,
            self.degenerate
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, json).map_err(io_err(path))
    }
}

/// Short hex digest of the model configuration.
pub fn fingerprint(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("model config serialises");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Predicted ΔR for one pair, or `None` when the pose solve is degenerate.
pub fn predict(model: &Model, params: &ParamStore<f32>, sample: &SamplePair) -> Result<Option<Rotation>> {
    let g = Graph::<f32>::new();
    let p = Bound::new(&g, params, false);
    match model.forward_pair(&p, sample, Mode::Infer { reconstruct: false }, sample.id as u64) {
        Ok(out) => Ok(Some(out.rotation()?)),
        Err(e) if e.is_degenerate() => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn check_size(model: &Model, samples: &[SamplePair]) -> Result<()> {
    if samples.is_empty() {
        return Err(HarnessError::Data("cannot evaluate an empty dataset".into()));
    }
    let want = model.config.image_size;
    if let Some(s) = samples.iter().find(|s| s.size != want) {
        return Err(HarnessError::Data(format!("sample {} has size {} but the model expects {want}", s.id, s.size)));
    }
    Ok(())
}

/// Query→reference inference over `samples`, scored by geodesic error.
pub fn evaluate_samples(model: &Model, params: &ParamStore<f32>, samples: &[SamplePair]) -> Result<EvalReport> {
    check_size(model, samples)?;
    let start = Instant::now();
    let preds: Vec<Option<Rotation>> = samples.par_iter().map(|s| predict(model, params, s)).collect::<Result<_>>()?;
    let degenerate = preds.iter().filter(|p| p.is_none()).count();
    let errors = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| geodesic_angle_deg(&p.unwrap_or_default(), &s.delta_r))
        .collect();
    EvalReport::build("model", errors, fingerprint(&model.config), degenerate, start)
}

/// Evaluates a checkpoint on one split of the dataset at `data`. Reads only.
pub fn evaluate(ckpt: &Checkpoint, data: &Path, split: Split) -> Result<EvalReport> {
    let model = Model::new(ckpt.config.model.clone())?;
    let ds = Dataset::open(data, split)?;
    if ds.size() != model.config.image_size {
        return Err(HarnessError::Data(format!(
            "dataset renders {}px images but the checkpoint expects {}px",
            ds.size(),
            model.config.image_size
        )));
    }
    evaluate_samples(&model, &ckpt.params, &load_split(data, split)?)
}

/// Exact camera-frame coordinates of every point visible in the query view, in both frames.
pub fn ground_truth_correspondences(sample: &SamplePair) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let obj = make_object(sample.object_seed);
    let shot = render(&obj, &sample.r_q, sample.size);
    let ids: BTreeSet<u32> = shot.point_id.iter().flatten().copied().collect();
    ids.iter()
        .map(|&k| {
            let p = obj.points[k as usize];
            (sample.r_q.apply(p), sample.r_r.apply(p))
        })
        .unzip()
}

/// Pose from renderer ground-truth correspondences, solved by the model's pose head in f64.
pub fn oracle_predict(model: &Model, sample: &SamplePair) -> Result<Rotation> {
    let (xq, xr) = ground_truth_correspondences(sample);
    let n = xq.len();
    let flat = |v: &[[f64; 3]]| v.iter().flatten().copied().collect::<Vec<_>>();
    let g = Graph::<f64>::new();
    let cs = Correspondences {
        x_q: g.constant(Tensor::new(vec![n, 3], flat(&xq)).map_err(kpose::CoreError::from)?),
        x_r: g.constant(Tensor::new(vec![n, 3], flat(&xr)).map_err(kpose::CoreError::from)?),
        confidence: g.constant(Tensor::ones(&[n])),
        depth: g.constant(Tensor::new(vec![n, 1], xq.iter().map(|x| x[2]).collect()).map_err(kpose::CoreError::from)?),
        feats: g.constant(Tensor::zeros(&[n, 1])),
    };
    let r = model.solve_pose(&cs)?.value();
    Ok(Rotation::from_rows(r.data())?)
}

/// Oracle realizability check: ground-truth correspondences through the pose solver.
pub fn oracle_eval(model: &Model, samples: &[SamplePair]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(HarnessError::Data("cannot evaluate an empty dataset".into()));
    }
    let start = Instant::now();
    let errors = samples
        .par_iter()
        .map(|s| Ok(geodesic_angle_deg(&oracle_predict(model, s)?, &s.delta_r)))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::build("oracle", errors, fingerprint(&model.config), 0, start)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BaselineKind {
    Identity,
    Random,
}

/// Scores a model-free predictor: ΔR = I, or Haar-uniform draws from `seed`.
pub fn baseline_eval(kind: BaselineKind, samples: &[SamplePair], seed: u64) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(HarnessError::Data("cannot evaluate an empty dataset".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (label, errors) = match kind {
        BaselineKind::Identity => ("identity", samples.iter().map(|s| s.delta_r.angle().to_degrees()).collect()),
        BaselineKind::Random => (
            "random",
            samples.iter().map(|s| geodesic_angle_deg(&random_rotation(&mut rng), &s.delta_r)).collect(),
        ),
    };
    EvalReport::build(label, errors, String::new(), 0, start)
}
