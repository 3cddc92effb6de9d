//! Ablation grids: one axis swept over a list of values, each value trained
//! `repeats` times, reported per cell and as mean and sample std.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use restad_core::metrics::EvalReport;
use restad_core::score::Criterion;
use restad_core::SCHEMA_VERSION;

use crate::config::{AblationGrid, CriterionValue, InitMode, RunConfig, Sweep};
use crate::error::{Error, Result};
use crate::pipeline::{evaluate_criteria, raw_scores, train, Prepared};

pub const METRICS: [&str; 5] = ["f1", "auc_roc", "auc_pr", "vus_roc", "vus_pr"];

fn metric_values(r: &EvalReport) -> [f64; 5] {
    [r.f1, r.auc_roc, r.auc_pr, r.vus_roc, r.vus_pr]
}

/// Seed of the `index`-th independently trained model of a grid.
pub fn cell_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRow {
    pub value: String,
    pub repeat: usize,
    pub seed: u64,
    pub outcome: std::result::Result<[f64; 5], String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub value: String,
    pub n_ok: usize,
    pub mean: Option<[f64; 5]>,
    /// Sample standard deviation; needs two successful repeats.
    pub std: Option<[f64; 5]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub axis: &'static str,
    pub cells: Vec<CellRow>,
    pub aggregates: Vec<AggregateRow>,
}

/// One training run. On the criterion axis a single RBF model serves every
/// criterion of a repeat; the `transformer` value gets its own vanilla model.
struct Job {
    repeat: usize,
    cfg: RunConfig,
    /// (value position, label, criterion used for scoring)
    outputs: Vec<(usize, String, Criterion)>,
}

fn jobs(grid: &AblationGrid, base: &RunConfig, base_seed: u64) -> Vec<Job> {
    let mut out = Vec::new();
    let mut index = 0;
    let mut push = |repeat: usize, mut cfg: RunConfig, outputs: Vec<(usize, String, Criterion)>| {
        let seed = cell_seed(base_seed, index);
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        out.push(Job {
            repeat,
            cfg,
            outputs,
        });
        index += 1;
    };
    for repeat in 0..grid.repeats {
        match &grid.sweep {
            Sweep::Criterion(values) => {
                let rbf: Vec<_> = values
                    .iter()
                    .enumerate()
                    .filter_map(|(i, v)| v.criterion().map(|c| (i, v.name().to_string(), c)))
                    .collect();
                if !rbf.is_empty() {
                    push(repeat, base.clone(), rbf);
                }
                if let Some(i) = values
                    .iter()
                    .position(|v| *v == CriterionValue::Transformer)
                {
                    let mut cfg = base.clone();
                    cfg.model.rbf_enabled = false;
                    cfg.init = InitMode::Random;
                    push(
                        repeat,
                        cfg,
                        vec![(i, "transformer".into(), Criterion::ROnly)],
                    );
                }
            }
            Sweep::RbfPosition(values) => {
                for (i, &p) in values.iter().enumerate() {
                    let mut cfg = base.clone();
                    cfg.model.rbf_position = p;
                    push(repeat, cfg, vec![(i, p.to_string(), base.criterion)]);
                }
            }
            Sweep::NCenters(values) => {
                for (i, &m) in values.iter().enumerate() {
                    let mut cfg = base.clone();
                    cfg.model.n_centers = m;
                    push(repeat, cfg, vec![(i, m.to_string(), base.criterion)]);
                }
            }
        }
    }
    out
}

fn run_job(job: &Job, data: &Prepared) -> Vec<(usize, CellRow)> {
    let cfg = &job.cfg;
    let criteria: Vec<Criterion> = job.outputs.iter().map(|o| o.2).collect();
    let result = (|| -> Result<Vec<EvalReport>> {
        resolve_for(cfg.clone(), &criteria)?;
        let trained = train(cfg, data)?;
        let raw = raw_scores(&trained.model, &data.test, cfg.train.batch_size)?;
        let evals = evaluate_criteria(
            &raw,
            &data.labels,
            &criteria,
            cfg.anomaly_ratio,
            cfg.max_buffer,
            &data.name,
            "",
        )?;
        Ok(evals.into_iter().map(|e| e.report.metrics).collect())
    })();
    job.outputs
        .iter()
        .enumerate()
        .map(|(k, (pos, label, _))| {
            let outcome = match &result {
                Ok(reports) => Ok(metric_values(&reports[k])),
                Err(e) => Err(e.to_string()),
            };
            let row = CellRow {
                value: label.clone(),
                repeat: job.repeat,
                seed: cfg.model.seed,
                outcome,
            };
            (*pos, row)
        })
        .collect()
}

/// Like [`RunConfig::resolved`] but checks `criteria` instead of the
/// configured criterion, which is kept as is.
fn resolve_for(cfg: RunConfig, criteria: &[Criterion]) -> Result<RunConfig> {
    let rbf = cfg.model.rbf_enabled;
    if let Some(c) = criteria.iter().find(|c| c.needs_similarity() && !rbf) {
        return Err(Error::Usage(format!(
            "criterion {c} needs rbf_enabled = true"
        )));
    }
    let criterion = cfg.criterion;
    let resolved = RunConfig {
        criterion: Criterion::ROnly,
        ..cfg
    }
    .resolved()?;
    Ok(RunConfig {
        criterion,
        ..resolved
    })
}

fn aggregate(value: String, cells: &[&CellRow]) -> AggregateRow {
    let ok: Vec<[f64; 5]> = cells
        .iter()
        .filter_map(|c| c.outcome.as_ref().ok().copied())
        .collect();
    let n = ok.len();
    let mean =
        (n > 0).then(|| core::array::from_fn(|m| ok.iter().map(|r| r[m]).sum::<f64>() / n as f64));
    let std = mean.filter(|_| n > 1).map(|mu: [f64; 5]| {
        core::array::from_fn(|m| {
            let ss: f64 = ok.iter().map(|r| (r[m] - mu[m]).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        })
    });
    AggregateRow {
        value,
        n_ok: n,
        mean,
        std,
    }
}

/// The grid's resolved run config. On the criterion axis the configured
/// criterion is not checked, since the axis replaces it.
pub fn base_config(grid: &AblationGrid) -> Result<RunConfig> {
    grid.validate()?;
    match grid.sweep {
        Sweep::Criterion(_) => resolve_for(grid.run.clone(), &[]),
        _ => grid.run.clone().resolved(),
    }
}

/// Runs every cell of `grid` on `data`. `parallel > 1` spreads independent
/// cells over a thread pool; results do not depend on the thread count.
pub fn run_grid(grid: &AblationGrid, data: &Prepared, parallel: usize) -> Result<AblationResult> {
    let base = base_config(grid)?;
    let base_seed = base.seed.unwrap_or(base.model.seed);
    let jobs = jobs(grid, &base, base_seed);
    let finished: Vec<Vec<(usize, CellRow)>> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(|j| run_job(j, data)).collect())
    } else {
        jobs.iter().map(|j| run_job(j, data)).collect()
    };
    let mut cells: Vec<(usize, CellRow)> = finished.into_iter().flatten().collect();
    cells.sort_by_key(|(pos, row)| (*pos, row.repeat));
    let labels = grid.sweep.labels();
    let aggregates = labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let rows: Vec<&CellRow> = cells
                .iter()
                .filter(|(p, _)| *p == i)
                .map(|(_, r)| r)
                .collect();
            aggregate(label.clone(), &rows)
        })
        .collect();
    Ok(AblationResult {
        axis: grid.sweep.axis(),
        cells: cells.into_iter().map(|(_, r)| r).collect(),
        aggregates,
    })
}

fn fmt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Cell rows followed by aggregate rows. Metric columns alternate value and
/// std; std is empty on cell rows.
pub fn to_csv(result: &AblationResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "schema_version",
        "row_kind",
        "axis",
        "value",
        "repeat",
        "seed",
        "status",
        "n_ok",
    ];
    let std_names: Vec<String> = METRICS.iter().map(|m| format!("{m}_std")).collect();
    for (m, s) in METRICS.iter().zip(&std_names) {
        header.push(m);
        header.push(s);
    }
    header.push("error");
    let csv_err = |e: csv::Error| Error::Usage(format!("csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    let schema = SCHEMA_VERSION.to_string();
    for c in &result.cells {
        let (status, ok, error) = match &c.outcome {
            Ok(v) => ("ok", Some(*v), String::new()),
            Err(e) => ("failed", None, e.clone()),
        };
        let mut rec = vec![
            schema.clone(),
            "cell".into(),
            result.axis.into(),
            c.value.clone(),
            c.repeat.to_string(),
            c.seed.to_string(),
            status.into(),
            usize::from(ok.is_some()).to_string(),
        ];
        for m in 0..5 {
            rec.push(fmt(ok.map(|v| v[m])));
            rec.push(String::new());
        }
        rec.push(error);
        w.write_record(&rec).map_err(csv_err)?;
    }
    for a in &result.aggregates {
        let status = if a.n_ok > 0 { "ok" } else { "failed" };
        let mut rec = vec![
            schema.clone(),
            "aggregate".into(),
            result.axis.into(),
            a.value.clone(),
            String::new(),
            String::new(),
            status.into(),
            a.n_ok.to_string(),
        ];
        for m in 0..5 {
            rec.push(fmt(a.mean.map(|v| v[m])));
            rec.push(fmt(a.std.map(|v| v[m])));
        }
        rec.push(String::new());
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Usage(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Aggregate rows as an aligned text table with `±std` where available.
pub fn render_aggregates(result: &AblationResult) -> String {
    let width = result
        .aggregates
        .iter()
        .map(|a| a.value.len())
        .max()
        .unwrap_or(0)
        .max(result.axis.len());
    let mut out = format!("{:<width$}", result.axis);
    for h in ["F1", "AUC-ROC", "AUC-PR", "VUS-ROC", "VUS-PR"] {
        out.push_str(&format!("  {h:>15}"));
    }
    out.push('\n');
    for a in &result.aggregates {
        out.push_str(&format!("{:<width$}", a.value));
        for m in 0..5 {
            let cell = match (a.mean, a.std) {
                (Some(mu), Some(sd)) => format!("{:.4}±{:.4}", mu[m], sd[m]),
                (Some(mu), None) => format!("{:.4}", mu[m]),
                _ => "failed".into(),
            };
            out.push_str(&format!("  {cell:>15}"));
        }
        out.push('\n');
    }
    out
}
