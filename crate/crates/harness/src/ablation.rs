use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use kpose::synthdata::Split;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::error::{io_err, Result};
use crate::eval::evaluate;
use crate::macs::count_macs;
use crate::train::train;

pub const CSV_HEADER: [&str; 5] = ["variant", "mae_deg", "acc30", "acc15", "gmacs"];

/// Single-switch variants, the full model first.
pub const SWITCH_VARIANTS: [&str; 9] = [
    "full",
    "dense_kpt",
    "random_kpt",
    "no_self_attn",
    "no_cross_attn",
    "dense_reg",
    "global_reg",
    "no_mask_loss",
    "no_confidence",
];

pub const KEYPOINT_SWEEP: [usize; 4] = [16, 32, 48, 64];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub mae_deg: f64,
    pub acc30: f64,
    pub acc15: f64,
    pub gmacs: f64,
}

/// Every variant name with its training configuration derived from `base`.
pub fn variant_configs(base: &TrainConfig) -> Result<Vec<(String, TrainConfig)>> {
    let mut out = Vec::new();
    for name in SWITCH_VARIANTS {
        let mut cfg = base.clone();
        cfg.model.ablation.enable(name)?;
        out.push((name.to_string(), cfg));
    }
    for n in KEYPOINT_SWEEP {
        let mut cfg = base.clone();
        cfg.model.n_kpt = n;
        out.push((format!("n_kpt_{n}"), cfg));
    }
    Ok(out)
}

/// Trains and evaluates each variant with the same seed and budget, writing
/// `<variant>.sacp`, `<variant>.jsonl` and `ablation.csv` under `out_dir`.
/// A sweep entry identical to the full configuration reuses its result.
pub fn run_ablation_suite(base: &TrainConfig, out_dir: &Path, budget_epochs: Option<usize>) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut base = base.clone();
    if let Some(e) = budget_epochs {
        base.epochs = e;
    }
    let mut done: Vec<(TrainConfig, AblationRow)> = Vec::new();
    let mut rows = Vec::new();
    for (name, mut cfg) in variant_configs(&base)? {
        cfg.checkpoint = out_dir.join(format!("{name}.sacp"));
        let reuse = done.iter().find(|(c, _)| c.model == cfg.model).map(|(_, r)| r.clone());
        let row = match reuse {
            Some(r) => AblationRow { variant: name, ..r },
            None => {
                let log_path = out_dir.join(format!("{name}.jsonl"));
                let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
                let ckpt = train(cfg.clone(), None, &mut log)?;
                let report = evaluate(&ckpt, &cfg.data, Split::Test)?;
                let m = report.metrics;
                let row = AblationRow { variant: name, mae_deg: m.mae_deg, acc30: m.acc30, acc15: m.acc15, gmacs: count_macs(&cfg.model)? };
                done.push((cfg, row.clone()));
                row
            }
        };
        rows.push(row);
    }
    write_csv(&rows, &out_dir.join("ablation.csv"))?;
    Ok(rows)
}

pub fn write_csv(rows: &[AblationRow], path: &Path) -> Result<PathBuf> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([r.variant.clone(), format!("{:.1}", r.mae_deg), format!("{:.4}", r.acc30), format!("{:.4}", r.acc15), format!("{:.6}", r.gmacs)])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(path.to_path_buf())
}
