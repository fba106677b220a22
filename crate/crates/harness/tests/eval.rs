mod common;

use std::collections::BTreeMap;
use std::path::Path;

use kpose::model::Model;
use kpose::synthdata::{make_dataset, make_pair, DatasetConfig, SamplePair, Split};
use kpose_harness::eval::{baseline_eval, evaluate, evaluate_samples, fingerprint, oracle_eval, BaselineKind};
use kpose_harness::macs::count_macs;
use kpose_harness::train::{load_split, train};
use sha2::{Digest, Sha256};

/// Mean geodesic angle of a Haar-uniform rotation: π/2 + 2/π radians.
fn haar_mean_angle_deg() -> f64 {
    (std::f64::consts::FRAC_PI_2 + 2.0 / std::f64::consts::PI).to_degrees()
}

fn pairs(n: usize, size: usize, range: Option<[f64; 2]>) -> Vec<SamplePair> {
    (0..n).map(|i| make_pair(i, 90_000 + i as u64, range, size).unwrap()).collect()
}

fn tree_hash(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.display().to_string(), Sha256::digest(std::fs::read(&p).unwrap()).to_vec());
            }
        }
    }
    out
}

#[test]
fn haar_oracle_value() {
    assert!((haar_mean_angle_deg() - 126.476).abs() < 1e-3);
}

#[test]
fn random_baseline_matches_the_haar_mean() {
    let set = pairs(10_000, 8, None);
    let r = baseline_eval(BaselineKind::Random, &set, 3).unwrap();
    assert_eq!(r.errors_deg.len(), 10_000);
    assert!((r.metrics.mae_deg - haar_mean_angle_deg()).abs() < 1.0, "{}", r.metrics.mae_deg);
    let again = baseline_eval(BaselineKind::Random, &set, 3).unwrap();
    assert!(r.same_result(&again));
    assert!(!r.same_result(&baseline_eval(BaselineKind::Random, &set, 4).unwrap()));
}

#[test]
fn identity_baseline() {
    let fixed = baseline_eval(BaselineKind::Identity, &pairs(50, 8, Some([0.0, 0.0])), 0).unwrap();
    assert_eq!(fixed.metrics.mae_deg, 0.0);
    assert_eq!((fixed.metrics.acc30, fixed.metrics.acc15), (1.0, 1.0));
    let uniform = baseline_eval(BaselineKind::Identity, &pairs(3000, 8, None), 0).unwrap();
    assert!((uniform.metrics.mae_deg - haar_mean_angle_deg()).abs() < 2.0, "{}", uniform.metrics.mae_deg);
}

#[test]
fn oracle_correspondences_recover_the_pose() {
    let model = Model::new(common::tiny_model()).unwrap();
    let r = oracle_eval(&model, &pairs(30, 16, None)).unwrap();
    assert!(r.metrics.mae_deg < 0.01, "{}", r.metrics.mae_deg);
}

#[test]
fn empty_or_mismatched_sets_are_rejected() {
    let model = Model::new(common::tiny_model()).unwrap();
    let params = model.init_params::<f32>(0).unwrap();
    assert!(evaluate_samples(&model, &params, &[]).is_err());
    assert!(oracle_eval(&model, &[]).is_err());
    assert!(baseline_eval(BaselineKind::Identity, &[], 0).is_err());
    assert!(evaluate_samples(&model, &params, &pairs(2, 32, None)).is_err());
}

#[test]
fn evaluation_is_read_only_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::dataset(dir.path(), 10, 6, 21, 16);
    let cfg = common::tiny_train_config(&data, dir.path().join("m.sacp"));
    let ck = train(cfg, None, &mut std::io::sink()).unwrap();
    let before = tree_hash(dir.path());
    let a = evaluate(&ck, &data, Split::Test).unwrap();
    let b = evaluate(&kpose_harness::checkpoint::Checkpoint::load(&dir.path().join("m.sacp")).unwrap(), &data, Split::Test).unwrap();
    assert_eq!(tree_hash(dir.path()), before);
    assert!(a.same_result(&b));
    assert_eq!(a.errors_deg.len(), 6);
    assert!(a.errors_deg.iter().all(|e| (0.0..=180.0).contains(e)));
    assert_eq!(a.fingerprint, fingerprint(&ck.config.model));
    assert_eq!(a.kind, "model");

    let report = dir.path().join("r.json");
    a.save(&report).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    for k in ["metrics", "errors_deg", "fingerprint", "wall_ms"] {
        assert!(v.get(k).is_some(), "{k}");
    }
    assert!(a.summary().contains("mAE="));
}

#[test]
fn checkpoint_and_dataset_sizes_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::dataset(dir.path(), 4, 2, 1, 16);
    let ck = train(common::tiny_train_config(&data, dir.path().join("m.sacp")), None, &mut std::io::sink()).unwrap();
    let other = dir.path().join("big");
    make_dataset(&DatasetConfig { n_train: 1, n_test: 1, seed: 0, angle_range: None, size: 32 }, &other).unwrap();
    assert!(evaluate(&ck, &other, Split::Test).is_err());
    let empty = dir.path().join("empty");
    make_dataset(&DatasetConfig { n_train: 1, n_test: 0, seed: 0, angle_range: None, size: 16 }, &empty).unwrap();
    assert!(evaluate(&ck, &empty, Split::Test).is_err());
    assert_eq!(load_split(&empty, Split::Test).unwrap().len(), 0);
}

#[test]
fn fingerprint_tracks_the_model_configuration() {
    let a = common::tiny_model();
    let mut b = a.clone();
    b.ablation.no_cross_attn = true;
    assert_eq!(fingerprint(&a), fingerprint(&a.clone()));
    assert_ne!(fingerprint(&a), fingerprint(&b));
    assert_eq!(fingerprint(&a).len(), 16);
    assert!(count_macs(&a).unwrap() > 0.0);
}
