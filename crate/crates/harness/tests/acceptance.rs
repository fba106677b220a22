//! Acceptance criteria 1–9, one PASS/FAIL line each.
//!
//! `cargo test -p kpose-harness --test acceptance` runs the default set. Criteria 5 and 6
//! need hours of single-core training and only run with `-- --ignored` (just those two)
//! or `-- --include-ignored` (everything).

use std::path::Path;
use std::time::{Duration, Instant};

use engine::{grad_check, Graph, Tensor, Var};
use kpose::model::{Ablation, Mode, Model, ModelConfig};
use kpose::nn::{Activation, Attention, Bound, Encoder, LayerNorm, Linear, Mlp, ParamStore, RopeCoords};
use kpose::procrustes::{svd3, weighted_procrustes, weighted_procrustes_var, SvdGradient, WeightedPointPairs};
use kpose::so3::{accuracy_below, compute_metrics, geodesic_angle, geodesic_angle_deg, random_rotation, sixd_to_rotation_var, Rotation};
use kpose::synthdata::{make_dataset, make_pair, DatasetConfig, SamplePair, Split};
use kpose_harness::checkpoint::Checkpoint;
use kpose_harness::config::TrainConfig;
use kpose_harness::eval::{baseline_eval, evaluate, oracle_eval, BaselineKind};
use kpose_harness::train::{load_split, train};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

fn jitter(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng, amp: f64) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-amp..amp);
        }
    }
}

/// Relative gradient error of `sum(proj ⊙ build(inputs))` over inputs and parameters.
fn layer_error<F>(store: &ParamStore<f64>, inputs: Vec<Tensor<f64>>, seed: u64, build: F) -> f64
where
    F: for<'g> Fn(&Bound<'g, f64>, &[Var<'g, f64>]) -> kpose::Result<Var<'g, f64>>,
{
    let n_in = inputs.len();
    let mut point = inputs;
    point.extend(store.iter().map(|(_, t)| t.clone()));
    let g0 = Graph::<f64>::new();
    let vars: Vec<_> = point.iter().map(|t| g0.constant(t.clone())).collect();
    let shape = build(&Bound::from_vars(&g0, store, &vars[n_in..]).unwrap(), &vars[..n_in]).unwrap().shape();
    let proj = rand_tensor(&mut rng(seed), &shape);
    grad_check(
        |g, xs| {
            let b = Bound::from_vars(g, store, &xs[n_in..])?;
            build(&b, &xs[..n_in])?.mul(g.constant(proj.clone()))?.sum()
        },
        &point,
        1e-5,
    )
    .unwrap()
    .max_rel_error
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut errs: Vec<(&str, f64)> = Vec::new();
    let mut r = rng(100);

    let lin = Linear::new("l", 5, 4, true);
    let mut s = ParamStore::new();
    lin.init(&mut s, &mut r).unwrap();
    jitter(&mut s, &mut r, 0.3);
    errs.push(("linear", layer_error(&s, vec![rand_tensor(&mut r, &[3, 5])], 1, |b, x| lin.forward(b, x[0]))));

    let ln = LayerNorm { name: "n".into(), dim: 6 };
    let mut s = ParamStore::new();
    ln.init(&mut s).unwrap();
    jitter(&mut s, &mut r, 0.3);
    errs.push(("layer_norm", layer_error(&s, vec![rand_tensor(&mut r, &[4, 6])], 2, |b, x| ln.forward(b, x[0]))));

    for (name, act) in [("mlp_relu", Activation::Relu), ("mlp_tanh", Activation::Tanh)] {
        let mlp = Mlp::new("m", &[6, 7, 7, 2], act).unwrap();
        let mut s = ParamStore::new();
        mlp.init(&mut s, &mut r).unwrap();
        jitter(&mut s, &mut r, 0.3);
        errs.push((name, layer_error(&s, vec![rand_tensor(&mut r, &[4, 6])], 3, |b, x| mlp.forward(b, x[0]))));
    }

    let att = Attention::new("a", 8, 2).unwrap();
    let mut s = ParamStore::new();
    att.init(&mut s, &mut r).unwrap();
    jitter(&mut s, &mut r, 0.3);
    let x = rand_tensor(&mut r, &[4, 8]);
    let kv = rand_tensor(&mut r, &[3, 8]);
    let cq = [[0.5, -1.0], [2.0, 3.0], [-1.5, 0.25], [0.0, 1.0]];
    let ck = [[1.0, 1.0], [-2.0, 0.5], [3.0, -3.0]];
    errs.push(("mhsa", layer_error(&s, vec![x.clone()], 4, |b, x| att.mhsa(b, x[0], None))));
    errs.push(("mhca", layer_error(&s, vec![x.clone(), kv.clone()], 5, |b, x| att.mhca(b, x[0], x[1], None))));
    errs.push(("mhsa_rope", layer_error(&s, vec![x.clone()], 6, |b, x| att.mhsa(b, x[0], Some(&cq)))));
    errs.push((
        "mhca_rope",
        layer_error(&s, vec![x, kv], 7, |b, x| att.mhca(b, x[0], x[1], Some(RopeCoords { query: &cq, key: &ck }))),
    ));

    let enc = Encoder::new("e", 8, &[3, 4, 4], &[2, 1]).unwrap();
    let mut s = ParamStore::new();
    enc.init(&mut s, &mut r).unwrap();
    jitter(&mut s, &mut r, 0.3);
    let img = rand_tensor(&mut r, &[3, 8, 8]).map(|v| 0.5 + 0.5 * v);
    errs.push(("encoder", layer_error(&s, vec![img], 8, |b, x| enc.forward(b, x[0]))));

    let empty = ParamStore::new();
    let coords = [[0.0, 1.0], [2.5, -1.0], [3.0, 3.0]];
    errs.push(("rope_fuse", layer_error(&empty, vec![rand_tensor(&mut r, &[3, 8])], 9, |_, x| kpose::nn::rope_fuse(x[0], &coords))));
    errs.push(("sixd", layer_error(&empty, vec![rand_tensor(&mut r, &[6])], 10, |_, x| sixd_to_rotation_var(x[0]))));
    let xq = rand_tensor(&mut r, &[6, 3]);
    let rot = random_rotation(&mut r);
    let xr = Tensor::from_fn(&[6, 3], |i| {
        let p = rot.apply([xq.data()[3 * (i / 3)], xq.data()[3 * (i / 3) + 1], xq.data()[3 * (i / 3) + 2]]);
        p[i % 3] + 0.2 * r.gen_range(-1.0..1.0)
    });
    let w = Tensor::from_fn(&[6], |_| r.gen_range(0.2..1.0));
    errs.push((
        "weighted_svd",
        layer_error(&empty, vec![xq, xr, w], 11, |_, x| weighted_procrustes_var(x[0], x[1], x[2], SvdGradient::Backprop)),
    ));
    let worst_layer = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let layers_ok = worst_layer < 1e-5;

    // Full training objective on the tiny configuration, at a point with a clear singular-value gap.
    let model = Model::new(ModelConfig::tiny()).unwrap();
    let mut params = model.init_params::<f64>(0).unwrap();
    let mut jr = rng(0xabc);
    for (name, t) in params.iter_mut() {
        let (scale, amp) = if name == "kpt.queries" { (4.0, 4.0) } else { (1.0, 0.3) };
        for v in t.data_mut() {
            *v = *v * scale + jr.gen_range(-amp..amp);
        }
    }
    let sample = make_pair(1, 501, None, 16).unwrap();
    let gap = spectral_gap(&model, &params, &sample);
    let point: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let full = grad_check(
        |g, xs| {
            let p = Bound::from_vars(g, &params, xs)?;
            Ok(model.forward_pair(&p, &sample, Mode::Train, 9)?.losses.expect("train").total)
        },
        &point,
        1e-5,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let pass = layers_ok && full.max_rel_error < 1e-4 && gap > 1e-4 && elapsed < Duration::from_secs(120);
    let worst_name = errs.iter().max_by(|a, b| a.1.total_cmp(&b.1)).map(|e| e.0).unwrap_or("");
    outcome(
        pass,
        format!(
            "{} layer checks, worst {worst_name} {worst_layer:.2e}; full graph {:.2e} over {} entries (spectral gap {gap:.1e}); {:.1}s",
            errs.len(),
            full.max_rel_error,
            full.entries_checked,
            elapsed.as_secs_f64()
        ),
    )
}

fn spectral_gap(model: &Model, params: &ParamStore<f64>, sample: &SamplePair) -> f64 {
    let g = Graph::<f64>::new();
    let p = Bound::new(&g, params, false);
    let out = model.forward_pair(&p, sample, Mode::Train, 9).unwrap();
    let mut gap = f64::INFINITY;
    for b in [&out.forward, out.backward.as_ref().unwrap()] {
        let c = b.corr.as_ref().unwrap();
        let rows = |v: &Tensor<f64>| v.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
        let pairs = WeightedPointPairs::new(rows(&c.x_q.value()), rows(&c.x_r.value()), c.confidence.value().data().to_vec()).unwrap();
        let s = svd3(&pairs.covariance()).s;
        gap = gap.min((s[1] * s[1] - s[2] * s[2]) / (s[0] * s[0]));
    }
    gap
}

fn unit_cloud(r: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).collect()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut r = rng(200);
    let (mut clean, mut planted) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let truth = random_rotation(&mut r);
        let xq = unit_cloud(&mut r, 48);
        let xr: Vec<_> = xq.iter().map(|p| truth.apply(*p)).collect();
        let est = weighted_procrustes(&WeightedPointPairs::uniform(xq.clone(), xr.clone()).unwrap()).unwrap();
        clean = clean.max(geodesic_angle(&est, &truth));

        let mut xr_out = xr;
        let mut w = vec![1.0; 48];
        for i in 0..48 {
            if i % 5 == 0 {
                xr_out[i] = unit_cloud(&mut r, 1)[0].map(|v| 3.0 * v);
                w[i] = 1e-8;
            }
        }
        let est = weighted_procrustes(&WeightedPointPairs::new(xq, xr_out, w).unwrap()).unwrap();
        planted = planted.max(geodesic_angle(&est, &truth));
    }
    let elapsed = start.elapsed();
    outcome(
        clean < 1e-6 && planted < 1e-5 && elapsed < Duration::from_secs(60),
        format!("max error {clean:.2e} rad clean, {planted:.2e} rad with 20% outliers; {:.1}s", elapsed.as_secs_f64()),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut r = rng(300);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..50 {
        let truth = random_rotation(&mut r);
        let xq = unit_cloud(&mut r, 4);
        let xr: Vec<_> = xq.iter().map(|p| truth.apply(*p).map(|v| v + 0.3 * r.gen_range(-1.0..1.0))).collect();
        let w: Vec<f64> = (0..4).map(|_| r.gen_range(0.1..1.0)).collect();
        let pairs = WeightedPointPairs::new(xq, xr, w).unwrap();
        let solved = pairs.objective(&weighted_procrustes(&pairs).unwrap());
        let best = (0..1_000_000).map(|_| pairs.objective(&random_rotation(&mut r))).fold(f64::INFINITY, f64::min);
        worst = worst.max(solved - best);
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-4 && elapsed < Duration::from_secs(300),
        format!("largest margin by which sampling beat the solver: {worst:.2e}; {:.1}s", elapsed.as_secs_f64()),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let model = Model::new(ModelConfig::default()).unwrap();
    let samples: Vec<SamplePair> = (0..200).map(|i| make_pair(i, 40_000 + i as u64, None, 64).unwrap()).collect();
    let report = oracle_eval(&model, &samples).unwrap();
    let elapsed = start.elapsed();
    outcome(
        report.metrics.mae_deg < 0.01 && elapsed < Duration::from_secs(60),
        format!("oracle mAE {:.2e}° over {} pairs; {:.1}s", report.metrics.mae_deg, report.metrics.n, elapsed.as_secs_f64()),
    )
}

fn desk_scale_data(dir: &Path) -> std::path::PathBuf {
    let root = dir.join("data");
    make_dataset(&DatasetConfig { n_train: 2000, n_test: 200, seed: 0, angle_range: None, size: 64 }, &root).unwrap();
    root
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = desk_scale_data(dir.path());
    let cfg = TrainConfig { data: data.clone(), checkpoint: dir.path().join("c5.sacp"), ..TrainConfig::default() };
    let ck = train(cfg, None, &mut std::io::sink()).unwrap();
    let report = evaluate(&ck, &data, Split::Test).unwrap();
    let random = baseline_eval(BaselineKind::Random, &load_split(&data, Split::Test).unwrap(), 0).unwrap();
    let m = report.metrics;
    let elapsed = start.elapsed();
    outcome(
        m.mae_deg <= 35.0 && m.acc30 >= 0.6 && 3.5 * m.mae_deg <= 126.5 && elapsed <= Duration::from_secs(3600),
        format!(
            "mAE {:.1}°, Acc@30 {:.1}%, Acc@15 {:.1}% (random baseline {:.1}°); {:.0} min",
            m.mae_deg,
            100.0 * m.acc30,
            100.0 * m.acc15,
            random.metrics.mae_deg,
            elapsed.as_secs_f64() / 60.0
        ),
    )
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = desk_scale_data(dir.path());
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in [0, 1] {
        let mut mae = Vec::new();
        for variant in ["full", "no_cross_attn", "global_reg", "random_kpt"] {
            let mut cfg = TrainConfig { data: data.clone(), seed, checkpoint: dir.path().join(format!("{variant}_{seed}.sacp")), ..TrainConfig::default() };
            cfg.model.ablation.enable(variant).unwrap();
            let ck = train(cfg, None, &mut std::io::sink()).unwrap();
            mae.push((variant, evaluate(&ck, &data, Split::Test).unwrap().metrics.mae_deg));
        }
        let full = mae[0].1;
        pass &= mae[1..].iter().all(|(_, m)| full < *m);
        lines.push(mae.iter().map(|(v, m)| format!("{v} {m:.1}°")).collect::<Vec<_>>().join(", "));
    }
    outcome(pass, format!("seed 0: {}; seed 1: {}", lines[0], lines[1]))
}

fn criterion_7() -> Outcome {
    let id = Rotation::identity();
    let half = Rotation::about_axis([0.0, 0.0, 1.0], std::f64::consts::PI).unwrap();
    let quarter = Rotation::about_axis([1.0, 0.0, 0.0], std::f64::consts::FRAC_PI_2).unwrap();
    let mut checks = vec![
        (geodesic_angle_deg(&id, &id) - 0.0).abs(),
        (geodesic_angle_deg(&id, &half) - 180.0).abs(),
        (geodesic_angle_deg(&quarter, &id) - 90.0).abs(),
    ];
    let errors = [10.0, 14.999, 15.0, 29.0, 30.0, 170.0];
    let m = compute_metrics(&errors, [30.0, 15.0]).unwrap();
    checks.push((m.mae_deg - 268.999 / 6.0).abs());
    checks.push((m.acc30 - 4.0 / 6.0).abs());
    checks.push((m.acc15 - 2.0 / 6.0).abs());
    checks.push((accuracy_below(&[30.0], 30.0) - 0.0).abs());
    let worst = checks.iter().copied().fold(0.0, f64::max);
    let rejects = compute_metrics(&[], [30.0, 15.0]).is_err();
    outcome(worst <= 1e-9 && rejects, format!("{} exact checks, worst deviation {worst:.1e}", checks.len()))
}

fn criterion_8() -> Outcome {
    let variants = ["full", "dense_kpt", "random_kpt", "no_self_attn", "no_cross_attn", "dense_reg", "global_reg", "no_confidence"];
    let models: Vec<Model> = variants
        .iter()
        .map(|v| {
            let mut a = Ablation::default();
            a.enable(v).unwrap();
            Model::new(ModelConfig { ablation: a, ..ModelConfig::tiny() }).unwrap()
        })
        .collect();
    let (mut heat_dev, mut orth_dev, mut det_dev) = (0.0f64, 0.0f64, 0.0f64);
    let (mut conf_ok, mut failures) = (true, 0);
    for i in 0..1000u64 {
        let model = &models[i as usize % models.len()];
        let mut params = model.init_params::<f64>(i).unwrap();
        jitter(&mut params, &mut rng(i ^ 0x5a5a), 0.3);
        let sample = make_pair(i as usize, 70_000 + i, None, 16).unwrap();
        let g = Graph::<f64>::new();
        let p = Bound::new(&g, &params, false);
        let out = match model.forward_pair(&p, &sample, Mode::Infer { reconstruct: false }, i) {
            Ok(o) => o,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        for kp in [&out.kp_q, &out.kp_r] {
            let h = kp.heatmaps.value();
            for row in h.data().chunks(h.shape()[1]) {
                heat_dev = heat_dev.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        if let Some(c) = &out.forward.corr {
            conf_ok &= c.confidence.value().data().iter().all(|&v| v > 0.0 && v < 1.0);
        }
        let r = out.forward.delta_r.value();
        let m = nalgebra_free_matrix(r.data());
        orth_dev = orth_dev.max(m.0);
        det_dev = det_dev.max(m.1);
    }
    outcome(
        failures == 0 && heat_dev < 1e-5 && conf_ok && orth_dev < 1e-6 && det_dev < 1e-6,
        format!(
            "1000 forwards over {} variants: heatmap |Σ−1| ≤ {heat_dev:.1e}, confidences in (0,1): {conf_ok}, ‖RᵀR−I‖∞ ≤ {orth_dev:.1e}, |det−1| ≤ {det_dev:.1e}, failed forwards {failures}",
            variants.len()
        ),
    )
}

/// `(‖RᵀR − I‖∞, |det R − 1|)` for a row-major 3×3.
fn nalgebra_free_matrix(r: &[f64]) -> (f64, f64) {
    let at = |i: usize, j: usize| r[3 * i + j];
    let mut orth = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| at(k, i) * at(k, j)).sum();
            orth = orth.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    let det = at(0, 0) * (at(1, 1) * at(2, 2) - at(1, 2) * at(2, 1)) - at(0, 1) * (at(1, 0) * at(2, 2) - at(1, 2) * at(2, 0))
        + at(0, 2) * (at(1, 0) * at(2, 1) - at(1, 1) * at(2, 0));
    (orth, (det - 1.0).abs())
}

fn criterion_9() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        make_dataset(&DatasetConfig { n_train: 24, n_test: 8, seed: 9, angle_range: None, size: 16 }, &data).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            lr: 3e-3,
            heldout: 4,
            checkpoint_every: 2,
            data: data.clone(),
            model: ModelConfig::tiny(),
            ..TrainConfig::default()
        };
        let run = |name: &str, epochs: usize, resume: Option<Checkpoint>| {
            let c = TrainConfig { epochs, checkpoint: dir.path().join(name), ..cfg.clone() };
            train(c, resume, &mut std::io::sink()).unwrap()
        };
        let a = run("a.sacp", 4, None);
        let first = std::fs::read(dir.path().join("a.sacp")).unwrap();
        let b = run("a.sacp", 4, None);
        let (ra, rb) = (evaluate(&a, &data, Split::Test).unwrap(), evaluate(&b, &data, Split::Test).unwrap());
        let reports_equal = ra.same_result(&rb);
        let files_equal = first == std::fs::read(dir.path().join("a.sacp")).unwrap();

        run("half.sacp", 2, None);
        let resumed = run("resumed.sacp", 4, Some(Checkpoint::load(&dir.path().join("half.sacp")).unwrap()));
        let resume_equal = resumed.to_bytes().unwrap() == Checkpoint::load(&dir.path().join("a.sacp")).unwrap().to_bytes().unwrap()
            || (resumed.params == a.params && resumed.adam == a.adam && resumed.rng == a.rng && resumed.step == a.step);
        let resumed_report = evaluate(&resumed, &data, Split::Test).unwrap();
        outcome(
            reports_equal && files_equal && resume_equal && resumed_report.same_result(&ra),
            format!(
                "repeat run reports equal: {reports_equal}, checkpoints byte-equal: {files_equal}, resumed state equal: {resume_equal}, mAE {:.1}°",
                ra.metrics.mae_deg
            ),
        )
    })
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let only_ignored = args.iter().any(|a| a == "--ignored");
    let include_ignored = args.iter().any(|a| a == "--include-ignored");
    let listing = args.iter().any(|a| a == "--list");
    type Criterion = fn() -> Outcome;
    let criteria: [(u8, &str, Criterion, bool); 9] = [
        (1, "gradient integrity", criterion_1, false),
        (2, "Procrustes exactness", criterion_2, false),
        (3, "Procrustes optimality", criterion_3, false),
        (4, "oracle realizability", criterion_4, false),
        (5, "end-to-end learning", criterion_5, true),
        (6, "ablation ordering", criterion_6, true),
        (7, "metric correctness", criterion_7, false),
        (8, "structural invariants", criterion_8, false),
        (9, "determinism and persistence", criterion_9, false),
    ];
    if listing {
        for (n, name, _, _) in criteria {
            println!("criterion_{n}_{}: test", name.replace(' ', "_"));
        }
        return;
    }
    let mut failed = 0;
    for (n, name, run, heavy) in criteria {
        let selected = if only_ignored { heavy } else { include_ignored || !heavy };
        if !selected {
            println!("criterion {n} ({name}): SKIPPED, hours of training; run with -- --ignored");
            continue;
        }
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!("criterion {n} ({name}): {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
