//! Acceptance checks 1-9. Prints one PASS/FAIL line per check and exits
//! non-zero if any fails. Tolerances and budgets are the constants below.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use restad::config::RunConfig;
use restad::pipeline::{evaluate_criteria, load_source, prepare, raw_scores, train};
use restad_core::init::{kmeans, sigma_tilde, GammaInitMode, SigmaTilde};
use restad_core::metrics::{auc_pr, auc_roc, quantile_threshold, vus, Curve, LabeledScores};
use restad_core::model::{Bindings, ModelConfig, Parameters, RbfLayer, RestadModel};
use restad_core::score::{composite_score, dissimilarity, minmax, Criterion};
use restad_core::tensor::{Tape, Tensor};
use restad_core::train::mse_loss;

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(30);
const RBF_TOL: f64 = 1e-12;
const RBF_DRAWS: usize = 1000;
const SCORE_TOL: f64 = 1e-12;
const ROC_ORACLE_TOL: f64 = 1e-9;
const ROC_INSTANCES: usize = 1000;
const AP_EXAMPLE_TOL: f64 = 1e-12;
const VUS_L0_TOL: f64 = 1e-12;
const VUS_ORACLE_TOL: f64 = 1e-9;
const METRIC_BUDGET: Duration = Duration::from_secs(60);
const THRESHOLD_PATTERNS: usize = 100;
const SIGMA_TOL: f64 = 1e-12;
const KMEANS_INSTANCES: usize = 100;
const E2E_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const E2E_MIN_AUC: f64 = 0.80;
const E2E_BUDGET: Duration = Duration::from_secs(600);
const ABLATION_BUDGET: Duration = Duration::from_secs(1800);

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(started: Instant, budget: Duration) -> Result<Duration, String> {
    let took = started.elapsed();
    ensure(took < budget, || {
        format!("took {took:.1?}, budget {budget:?}")
    })?;
    Ok(took)
}

// ---------------------------------------------------------------- 1

fn grad_model() -> RestadModel {
    RestadModel::new(ModelConfig {
        input_dim: 3,
        window_len: 8,
        d_model: 8,
        ffn_dim: 16,
        n_heads: 2,
        n_layers: 3,
        rbf_enabled: true,
        rbf_position: 2,
        n_centers: 4,
        dropout: 0.0,
        seed: 1,
    })
    .unwrap()
}

fn model_loss(model: &RestadModel, x: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(&[2, 8, 3], x.to_vec(), false).unwrap();
    let out = model.forward(&mut tape, xv, false, None).unwrap();
    let l = mse_loss(&mut tape, xv, out.reconstruction).unwrap();
    tape.value(l)[0]
}

fn gradient_fidelity() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..48).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut model = grad_model();
    let mut tape = Tape::new();
    let xv = tape.leaf(&[2, 8, 3], x.clone(), false).unwrap();
    let out = model.forward(&mut tape, xv, true, None).unwrap();
    let l = mse_loss(&mut tape, xv, out.reconstruction).unwrap();
    tape.backward(l).unwrap();
    model.zero_grad();
    model.accumulate_grads(&tape, &out.bindings).unwrap();
    let params: Vec<(String, Vec<f64>)> = model
        .named_parameters()
        .into_iter()
        .map(|(n, t)| (n, t.grad().unwrap_or(&[]).to_vec()))
        .collect();
    let mut worst = (String::new(), 0.0f64);
    for (p, (name, grad)) in params.iter().enumerate() {
        ensure(!grad.is_empty(), || format!("{name} has no gradient"))?;
        for (i, &a) in grad.iter().enumerate() {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                let mut k = 0;
                m.visit_mut("", &mut |_, t| {
                    if k == p {
                        t.data_mut()[i] += delta;
                    }
                    k += 1;
                });
                model_loss(&m, &x)
            };
            let rel = |n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
            // a ReLU input within the step of zero straddles the kink; a
            // smaller step avoids it
            let mut e = f64::INFINITY;
            for h in [1e-5, 1e-6, 1e-7] {
                e = e.min(rel((shifted(h) - shifted(-h)) / (2.0 * h)));
                if e < GRAD_REL_TOL {
                    break;
                }
            }
            if e > worst.1 {
                worst = (format!("{name}[{i}]"), e);
            }
        }
    }
    let groups = params.len();
    ensure(params.iter().any(|(n, _)| n.starts_with("rbf")), || {
        "no RBF parameters".into()
    })?;
    ensure(worst.1 < GRAD_REL_TOL, || {
        format!("{} relative error {:.3e}", worst.0, worst.1)
    })?;
    let took = within_budget(started, GRAD_BUDGET)?;
    Ok(format!(
        "{groups} parameter groups, worst relative error {:.2e} at {}, {took:.1?}",
        worst.1, worst.0
    ))
}

// ---------------------------------------------------------------- 2

fn rbf_z(center: &[f64], gamma: f64, h: &[f64]) -> f64 {
    let k = center.len();
    let layer = RbfLayer::new(Tensor::new(&[1, k], center.to_vec()).unwrap(), gamma).unwrap();
    let mut tape = Tape::new();
    let hv = tape.leaf(&[1, k], h.to_vec(), false).unwrap();
    let z = layer
        .forward(&mut tape, &mut Bindings::new(false), hv)
        .unwrap();
    tape.value(z)[0]
}

fn rbf_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..RBF_DRAWS {
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let gamma = rng.random_range(-3.0..3.0);
        let z = rbf_z(&c, gamma, &c);
        ensure(z == 1.0, || format!("z(c, c) = {z}"))?;
    }
    let z = rbf_z(&[0.0, 0.0], 0.0, &[1.0, 1.0]);
    let want = (-1.0f64).exp();
    ensure((z - want).abs() <= RBF_TOL, || {
        format!("gamma 0, distance^2 2: {z} vs {want}")
    })?;
    for _ in 0..RBF_DRAWS {
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut u: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        u.iter_mut().for_each(|v| *v /= norm);
        let at = |d: f64| -> Vec<f64> { c.iter().zip(&u).map(|(ci, ui)| ci + d * ui).collect() };
        let (d1, d2): (f64, f64) = (rng.random_range(0.05..1.5), rng.random_range(0.05..1.5));
        let (near, far) = (d1.min(d2), d1.max(d2) + 0.01);
        let (g1, g2): (f64, f64) = (rng.random_range(-2.0..1.0), rng.random_range(-2.0..1.0));
        let (lo, hi) = (g1.min(g2), g1.max(g2) + 0.01);
        let (zn, zf) = (rbf_z(&c, lo, &at(near)), rbf_z(&c, lo, &at(far)));
        ensure(zn > zf, || {
            format!("not decreasing in distance: {zn} <= {zf}")
        })?;
        let (zl, zh) = (rbf_z(&c, lo, &at(far)), rbf_z(&c, hi, &at(far)));
        ensure(zl > zh, || format!("not decreasing in gamma: {zl} <= {zh}"))?;
    }
    Ok(format!(
        "z(c) = 1 exactly, z = e^-1 within {RBF_TOL:e}, strictly decreasing over {RBF_DRAWS} draws"
    ))
}

// ---------------------------------------------------------------- 3

fn score_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.random_range(2..200);
        let m = rng.random_range(1..16);
        let z: Vec<f64> = (0..n * m).map(|_| rng.random_range(1e-300..=1.0)).collect();
        let eps_s = dissimilarity(&z, m);
        ensure(eps_s.iter().all(|&s| (0.0..1.0).contains(&s)), || {
            "eps_s outside [0, 1)".into()
        })?;
        let eps_r: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..20) as f64 * 0.37)
            .collect();
        let trace =
            composite_score(&eps_r, Some(&eps_s), Criterion::RTimesS).map_err(|e| e.to_string())?;
        let (norm_r, _) = minmax(&eps_r);
        for (nr, c) in norm_r.iter().zip(&trace.composite) {
            ensure(*nr != 0.0 || *c == 0.0, || {
                format!("composite {c} where normalized eps_r is 0")
            })?;
        }
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        if !(labels.contains(&0) && labels.contains(&1)) {
            continue;
        }
        let r_only = composite_score(&eps_r, None, Criterion::ROnly).map_err(|e| e.to_string())?;
        let a = auc_roc(LabeledScores::new(&r_only.composite, &labels).unwrap()).unwrap();
        let b = auc_roc(LabeledScores::new(&eps_r, &labels).unwrap()).unwrap();
        ensure((a - b).abs() <= SCORE_TOL, || {
            format!("AUC r_only {a} vs raw {b}")
        })?;
        checked += 1;
    }
    Ok(format!("{checked} random instances"))
}

// ---------------------------------------------------------------- 4

/// Pairwise weighted statistic with self-pairs; equals Mann-Whitney for
/// binary weights.
fn roc_oracle(s: &[f64], w: &[f64]) -> f64 {
    let (mut num, mut pos, mut neg) = (0.0, 0.0, 0.0);
    for i in 0..s.len() {
        pos += w[i];
        neg += 1.0 - w[i];
        for j in 0..s.len() {
            let k = if s[i] > s[j] {
                1.0
            } else if s[i] == s[j] {
                0.5
            } else {
                0.0
            };
            num += w[i] * (1.0 - w[j]) * k;
        }
    }
    num / (pos * neg)
}

fn pr_oracle(s: &[f64], w: &[f64]) -> f64 {
    let mut th = s.to_vec();
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let pos: f64 = w.iter().sum();
    let mut pts = vec![(0.0, 1.0)];
    let mut last_tp = 0.0;
    for t in th {
        let (tp, cnt) = s
            .iter()
            .zip(w)
            .filter(|(si, _)| **si >= t)
            .fold((0.0, 0.0), |(tp, c), (_, wi)| (tp + wi, c + 1.0));
        if tp > last_tp {
            pts.push((tp / pos, tp / cnt));
            last_tp = tp;
        }
    }
    pts.windows(2)
        .map(|p| (p[1].0 - p[0].0) * (p[1].1 + p[0].1) / 2.0)
        .sum()
}

/// Each segment casts a linear buffer of width `l`; overlaps keep the max.
fn smooth_oracle(labels: &[u8], l: usize) -> Vec<f64> {
    let n = labels.len() as i64;
    let mut out: Vec<f64> = labels.iter().map(|&v| v as f64).collect();
    for t in 0..n {
        for u in 0..n {
            if labels[u as usize] == 1 {
                let d = (t - u).unsigned_abs() as usize;
                if d <= l {
                    let v = 1.0 - d as f64 / (l + 1) as f64;
                    out[t as usize] = out[t as usize].max(v);
                }
            }
        }
    }
    out
}

fn metric_oracles() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < ROC_INSTANCES {
        let n = rng.random_range(2..=64);
        let s: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..6) as f64 / 6.0)
            .collect();
        let l: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        if !(l.contains(&0) && l.contains(&1)) {
            continue;
        }
        let w: Vec<f64> = l.iter().map(|&v| v as f64).collect();
        let got = auc_roc(LabeledScores::new(&s, &l).unwrap()).unwrap();
        worst = worst.max((got - roc_oracle(&s, &w)).abs());
        checked += 1;
    }
    ensure(worst <= ROC_ORACLE_TOL, || {
        format!("AUC-ROC off the oracle by {worst:e}")
    })?;
    let ap = auc_pr(LabeledScores::new(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap()).unwrap();
    ensure((ap - 11.0 / 12.0).abs() <= AP_EXAMPLE_TOL, || {
        format!("AP example {ap}, want 11/12")
    })?;
    let mut labels = vec![0u8; 20];
    labels[4] = 1;
    labels[9..13].iter_mut().for_each(|v| *v = 1);
    labels[14] = 1;
    let scores: Vec<f64> = (0..20).map(|_| rng.random_range(0..10) as f64).collect();
    let ls = LabeledScores::new(&scores, &labels).unwrap();
    let l0 = (vus(ls, Curve::Roc, 0).unwrap() - auc_roc(ls).unwrap())
        .abs()
        .max((vus(ls, Curve::Pr, 0).unwrap() - auc_pr(ls).unwrap()).abs());
    ensure(l0 <= VUS_L0_TOL, || {
        format!("VUS at L=0 off the AUC by {l0:e}")
    })?;
    let mut vus_err: f64 = 0.0;
    for (curve, oracle) in [
        (Curve::Roc, roc_oracle as fn(&[f64], &[f64]) -> f64),
        (Curve::Pr, pr_oracle),
    ] {
        let got = vus(ls, curve, 2).unwrap();
        let want = (0..=2)
            .map(|l| oracle(&scores, &smooth_oracle(&labels, l)))
            .sum::<f64>()
            / 3.0;
        vus_err = vus_err.max((got - want).abs());
    }
    ensure(vus_err <= VUS_ORACLE_TOL, || {
        format!("VUS at L=2 off the slice oracle by {vus_err:e}")
    })?;
    let took = within_budget(started, METRIC_BUDGET)?;
    Ok(format!(
        "ROC worst {worst:.1e} over {checked}, AP 11/12, VUS L=0 {l0:.1e}, VUS L=2 {vus_err:.1e}, {took:.1?}"
    ))
}

// ---------------------------------------------------------------- 5

fn threshold_protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for pattern in 0..THRESHOLD_PATTERNS {
        // from all-distinct to a handful of levels
        let levels = [2, 3, 5, 10, 100, 1000][pattern % 6];
        let s: Vec<f64> = (0..1000)
            .map(|_| rng.random_range(0..levels) as f64)
            .collect();
        let th = quantile_threshold(&s, 0.01).map_err(|e| e.to_string())?;
        let flagged = th.flagged.iter().filter(|&&f| f).count();
        ensure(flagged == 10 && th.k == 10, || {
            format!("pattern {pattern}: {flagged} flagged")
        })?;
    }
    Ok(format!(
        "10 of 1000 flagged across {THRESHOLD_PATTERNS} tie patterns"
    ))
}

// ---------------------------------------------------------------- 6

fn initialization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut sigma_err: f64 = 0.0;
    for _ in 0..KMEANS_INSTANCES {
        let (n, k, dim) = (
            rng.random_range(5..60),
            rng.random_range(1..6),
            rng.random_range(1..5),
        );
        let points: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let centers: Vec<f64> = (0..k * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let got = sigma_tilde(&points, &centers, dim)
            .map_err(|e| e.to_string())?
            .0;
        let mut sum = 0.0;
        for i in 0..n {
            let mut best = f64::INFINITY;
            for j in 0..k {
                let mut d = 0.0;
                for t in 0..dim {
                    d += (points[i * dim + t] - centers[j * dim + t]).powi(2);
                }
                best = best.min(d);
            }
            sum += best;
        }
        sigma_err = sigma_err.max((got - sum / n as f64).abs());
        if k <= n {
            let res = kmeans(&points, dim, k, 100, 0.0, rng.random()).map_err(|e| e.to_string())?;
            let trace = &res.inertia_trace;
            let ok = trace.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs());
            ensure(ok, || format!("inertia increased: {trace:?}"))?;
        }
    }
    ensure(sigma_err <= SIGMA_TOL, || {
        format!("sigma tilde off the oracle by {sigma_err:e}")
    })?;
    let gamma = GammaInitMode::Reciprocal.gamma(SigmaTilde(2.0));
    ensure(gamma == 0.5, || format!("sigma^2 = 2 gives gamma {gamma}"))?;
    Ok(format!(
        "sigma tilde within {sigma_err:.1e}, gamma(2) = 0.5, inertia monotone on {KMEANS_INSTANCES} instances"
    ))
}

// ---------------------------------------------------------------- 7

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let (mut rs, mut r) = (Vec::new(), Vec::new());
    for &seed in &E2E_SEEDS {
        let cfg = RunConfig::default()
            .with_seed(seed)
            .resolved()
            .map_err(|e| e.to_string())?;
        let run = || -> restad::Result<(f64, f64)> {
            let data = prepare(&load_source(&cfg.data)?, cfg.model.window_len)?;
            let trained = train(&cfg, &data)?;
            let raw = raw_scores(&trained.model, &data.test, cfg.train.batch_size)?;
            let crit = [Criterion::RTimesS, Criterion::ROnly];
            let ev = evaluate_criteria(
                &raw,
                &data.labels,
                &crit,
                cfg.anomaly_ratio,
                cfg.max_buffer,
                "",
                "",
            )?;
            Ok((ev[0].report.metrics.auc_roc, ev[1].report.metrics.auc_roc))
        };
        let (a, b) = run().map_err(|e| format!("seed {seed}: {e}"))?;
        eprintln!("  seed {seed}: AUC-ROC r_times_s {a:.4}, r_only {b:.4}");
        rs.push(a);
        r.push(b);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mrs, mr) = (mean(&rs), mean(&r));
    ensure(mrs >= E2E_MIN_AUC, || {
        format!("mean AUC-ROC r_times_s {mrs:.4} < {E2E_MIN_AUC}")
    })?;
    ensure(mrs >= mr, || {
        format!("mean AUC-ROC r_times_s {mrs:.4} < r_only {mr:.4}")
    })?;
    let took = within_budget(started, E2E_BUDGET)?;
    Ok(format!(
        "mean AUC-ROC r_times_s {mrs:.4} >= r_only {mr:.4}, {took:.1?}"
    ))
}

// ---------------------------------------------------------------- 8, 9

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_restad"))
}

fn run(cmd: &mut Command) -> Result<String, String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{cmd:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })?;
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

const SMALL_RUN: &str = r#"
init = "random"
[train]
epochs = 2
[data.synth]
train_len = 2000
test_len = 1000
random_spikes = 4
random_drifts = 4
"#;

fn write_grid(dir: &Path, name: &str, axis: &str, values: &str, repeats: usize) -> PathBuf {
    let body = format!("repeats = {repeats}\n[sweep]\naxis = \"{axis}\"\nvalues = {values}\n");
    let run = SMALL_RUN
        .replace("\n[", "\n[run.")
        .replacen("init", "[run]\ninit", 1);
    let path = dir.join(name);
    fs::write(&path, body + &run).unwrap();
    path
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let header = rdr
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(String::from)
        .collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()
        .map_err(|e| e.to_string())?;
    Ok((header, rows))
}

fn ablation_shape() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let grids = [
        (
            "table.toml",
            "criterion",
            r#"["transformer", "r_only", "s_only", "r_plus_s", "r_times_s"]"#,
            1,
            5,
        ),
        ("placement.toml", "rbf_position", "[1, 2, 3]", 1, 3),
        (
            "centers.toml",
            "n_centers",
            "[8, 16, 32, 64, 128, 256, 512]",
            3,
            7,
        ),
    ];
    let mut notes = Vec::new();
    for (file, axis, values, repeats, n_values) in grids {
        let started = Instant::now();
        let grid = write_grid(tmp.path(), file, axis, values, repeats);
        let out = tmp.path().join(axis);
        run(bin()
            .arg("ablate")
            .arg("--grid")
            .arg(&grid)
            .arg("--out")
            .arg(&out))?;
        let took = within_budget(started, ABLATION_BUDGET)?;
        let (header, rows) = read_csv(&out.join("ablation.csv"))?;
        for m in ["f1", "auc_roc", "auc_pr", "vus_roc", "vus_pr"] {
            ensure(header.iter().any(|h| h == m), || {
                format!("{axis}: no {m} column")
            })?;
            ensure(header.iter().any(|h| *h == format!("{m}_std")), || {
                format!("{axis}: no {m}_std column")
            })?;
        }
        let col = |name: &str| header.iter().position(|h| h == name).unwrap();
        let (kind, status, mean, std) = (
            col("row_kind"),
            col("status"),
            col("auc_roc"),
            col("auc_roc_std"),
        );
        let cells: Vec<_> = rows.iter().filter(|r| r[kind] == "cell").collect();
        let aggs: Vec<_> = rows.iter().filter(|r| r[kind] == "aggregate").collect();
        ensure(cells.len() == n_values * repeats, || {
            format!("{axis}: {} cell rows", cells.len())
        })?;
        ensure(aggs.len() == n_values, || {
            format!("{axis}: {} aggregate rows", aggs.len())
        })?;
        ensure(rows.iter().all(|r| r[status] == "ok"), || {
            format!("{axis}: a cell failed")
        })?;
        ensure(aggs.iter().all(|r| r[mean].parse::<f64>().is_ok()), || {
            format!("{axis}: empty means")
        })?;
        if repeats > 1 {
            ensure(aggs.iter().all(|r| r[std].parse::<f64>().is_ok()), || {
                format!("{axis}: empty std")
            })?;
        }
        notes.push(format!("{axis} {}x{} in {took:.0?}", aggs.len(), 5));
    }
    Ok(notes.join(", "))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        SMALL_RUN.replace("init = \"random\"", "init = \"kmeans\"\nseed = 17"),
    )
    .unwrap();
    let read = |p: PathBuf| fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
    let mut dirs = Vec::new();
    for (i, threads) in ["1", "4"].into_iter().enumerate() {
        let dir = tmp.path().join(format!("run{i}"));
        run(bin()
            .env("RAYON_NUM_THREADS", threads)
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&dir))?;
        run(bin()
            .env("RAYON_NUM_THREADS", threads)
            .args(["eval", "--criterion", "r_only,r_times_s", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(dir.join("checkpoint.json"))
            .arg("--out")
            .arg(dir.join("eval")))?;
        dirs.push(dir);
    }
    let files = [
        "checkpoint.json",
        "eval/report_r_only.json",
        "eval/report_r_times_s.json",
        "eval/trace_r_only.csv",
        "eval/trace_r_times_s.csv",
        "eval/report.txt",
    ];
    for f in files {
        ensure(read(dirs[0].join(f))? == read(dirs[1].join(f))?, || {
            format!("{f} differs between runs")
        })?;
    }
    // the echoed config differs only in its output directory
    let config = |p: PathBuf| -> Result<toml::Table, String> {
        let mut t: toml::Table =
            toml::from_str(&fs::read_to_string(&p).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        t.remove("out_dir");
        Ok(t)
    };
    ensure(
        config(dirs[0].join("run_config.toml"))? == config(dirs[1].join("run_config.toml"))?,
        || "run_config.toml differs beyond out_dir".into(),
    )?;
    // the training log differs only in wall-clock time
    let strip = |p: PathBuf| -> Result<Vec<serde_json::Value>, String> {
        let s = fs::read_to_string(&p).map_err(|e| e.to_string())?;
        s.lines()
            .map(|l| {
                let mut v: serde_json::Value =
                    serde_json::from_str(l).map_err(|e| e.to_string())?;
                v.as_object_mut().map(|o| o.remove("wall_secs"));
                Ok(v)
            })
            .collect()
    };
    ensure(
        strip(dirs[0].join("train_log.jsonl"))? == strip(dirs[1].join("train_log.jsonl"))?,
        || "train_log.jsonl differs beyond wall_secs".into(),
    )?;
    let grid = write_grid(tmp.path(), "grid.toml", "rbf_position", "[1, 3]", 2);
    let mut csvs = Vec::new();
    for parallel in ["1", "3"] {
        let out = tmp.path().join(format!("ablate{parallel}"));
        run(bin()
            .args(["ablate", "--parallel", parallel, "--grid"])
            .arg(&grid)
            .arg("--out")
            .arg(&out))?;
        csvs.push(read(out.join("ablation.csv"))?);
    }
    ensure(csvs[0] == csvs[1], || {
        "ablation.csv differs between --parallel 1 and 3".into()
    })?;
    Ok(format!(
        "{} artifacts byte-identical across runs and thread counts, config and log equal up to out_dir and wall time",
        files.len() + 1
    ))
}

fn main() {
    let checks: [Check; 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("RBF identities", rbf_identities),
        ("score algebra", score_algebra),
        ("metric oracles", metric_oracles),
        ("threshold protocol", threshold_protocol),
        ("initialization", initialization),
        ("end-to-end synthetic experiment", end_to_end),
        ("ablation harness shape", ablation_shape),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        match check() {
            Ok(detail) => println!("criterion {n} PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
