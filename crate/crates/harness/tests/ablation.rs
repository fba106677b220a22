mod common;

use kpose_harness::ablation::{run_ablation_suite, variant_configs, CSV_HEADER, KEYPOINT_SWEEP};

#[test]
fn variant_set_covers_every_switch_and_the_sweep() {
    let base = kpose_harness::config::TrainConfig::default();
    let v = variant_configs(&base).unwrap();
    let names: Vec<&str> = v.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "full", "dense_kpt", "random_kpt", "no_self_attn", "no_cross_attn", "dense_reg", "global_reg",
            "no_mask_loss", "no_confidence", "n_kpt_16", "n_kpt_32", "n_kpt_48", "n_kpt_64"
        ]
    );
    for (name, cfg) in &v {
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!((cfg.seed, cfg.epochs), (base.seed, base.epochs));
    }
    assert!(v[1].1.model.ablation.dense_kpt);
    assert!(v[4].1.model.ablation.no_cross_attn);
    assert_eq!(KEYPOINT_SWEEP, [16, 32, 48, 64]);
    assert_eq!(v[11].1.model, v[0].1.model);
}

#[test]
fn suite_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::dataset(dir.path(), 8, 4, 13, 16);
    let mut base = common::tiny_train_config(&data, dir.path().join("unused.sacp"));
    base.model.n_kpt = 48;
    base.model.grid = 8;
    let out = dir.path().join("suite");
    let rows = run_ablation_suite(&base, &out, Some(1)).unwrap();
    assert_eq!(rows.len(), 13);
    assert_eq!(rows.iter().filter(|r| r.variant == "full").count(), 1);
    assert_eq!(rows.iter().filter(|r| r.variant.starts_with("n_kpt_")).count(), 4);
    let full = &rows[0];
    let reused = rows.iter().find(|r| r.variant == "n_kpt_48").unwrap();
    assert_eq!((reused.mae_deg, reused.gmacs), (full.mae_deg, full.gmacs));
    assert!(!out.join("n_kpt_48.sacp").exists());
    assert!(rows.iter().all(|r| (0.0..=180.0).contains(&r.mae_deg) && r.gmacs > 0.0));

    let mut reader = csv::Reader::from_path(out.join("ablation.csv")).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER);
    let records: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(records.len(), 13);
    assert_eq!(&records[0][0], "full");
    let ck = kpose_harness::checkpoint::Checkpoint::load(&out.join("global_reg.sacp")).unwrap();
    assert_eq!(ck.epoch, 1);
    assert!(ck.config.model.ablation.global_reg);
}
