//! Load, train, score and evaluate, shared by the CLI and the ablation runner.

use std::time::Instant;

use restad_core::data::{generate_synthetic, normalize, windowize, RawDataset, WindowedDataset};
use restad_core::metrics::{evaluate, EvalReport, LabeledScores};
use restad_core::model::RestadModel;
use restad_core::score::{composite_score, score_windows, Criterion, RawScores, ScoreTrace};
use restad_core::train::{fit_timed, train_restad_kmeans, TrainLog};
use restad_core::SCHEMA_VERSION;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, InitMode, RunConfig};
use crate::error::{Error, Result};
use crate::io;

pub fn load_source(source: &DataSource) -> Result<RawDataset> {
    match source {
        DataSource::CsvDir(dir) => io::load_csv(dir),
        DataSource::Synth(spec) => Ok(generate_synthetic(spec)?),
    }
}

/// Normalized and windowed splits. Test labels are cut to the windowed prefix.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub name: String,
    pub train: WindowedDataset,
    pub test: WindowedDataset,
    pub labels: Vec<u8>,
}

pub fn prepare(raw: &RawDataset, window_len: usize) -> Result<Prepared> {
    let n = normalize(raw)?;
    let train = windowize(&n.train, window_len)?;
    let test = windowize(&n.test, window_len)?;
    let labels = n.test_labels[..test.kept_len()].to_vec();
    Ok(Prepared {
        name: n.name,
        train,
        test,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub schema_version: u32,
    pub phase: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: RestadModel,
    pub phases: Vec<(String, TrainLog)>,
    pub gamma_init: Option<f64>,
}

impl Trained {
    pub fn log_records(&self) -> Vec<LogRecord> {
        self.phases
            .iter()
            .flat_map(|(phase, log)| {
                log.epochs.iter().map(move |e| LogRecord {
                    schema_version: SCHEMA_VERSION,
                    phase: phase.clone(),
                    epoch: e.epoch,
                    mean_loss: e.mean_loss,
                    wall_secs: e.wall_secs,
                })
            })
            .collect()
    }
}

/// Trains the configured model on `data.train`. The model's `input_dim`
/// follows the data.
pub fn train(cfg: &RunConfig, data: &Prepared) -> Result<Trained> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.input_dim = data.train.dim;
    let origin = Instant::now();
    let mut clock = || origin.elapsed().as_secs_f64();
    match (cfg.init, model_cfg.rbf_enabled) {
        (InitMode::Kmeans, true) => {
            let (model, log) = train_restad_kmeans(
                &data.train,
                &model_cfg,
                &cfg.train,
                cfg.gamma_mode,
                &mut clock,
            )?;
            Ok(Trained {
                model,
                phases: vec![("base".into(), log.base), ("full".into(), log.full)],
                gamma_init: Some(log.gamma_init),
            })
        }
        (InitMode::Kmeans, false) => Err(Error::Usage("--init kmeans needs an RBF layer".into())),
        (InitMode::Random, _) => {
            let mut model = RestadModel::new(model_cfg)?;
            let gamma_init = model.rbf.as_ref().map(|r| r.gamma());
            let log = fit_timed(&mut model, &data.train, &cfg.train, &mut clock)?;
            Ok(Trained {
                model,
                phases: vec![("full".into(), log)],
                gamma_init,
            })
        }
    }
}

pub fn raw_scores(
    model: &RestadModel,
    data: &WindowedDataset,
    batch_size: usize,
) -> Result<RawScores> {
    if data.dim != model.config().input_dim {
        return Err(Error::Usage(format!(
            "dataset has {} features, checkpoint expects {}",
            data.dim,
            model.config().input_dim
        )));
    }
    Ok(score_windows(model, data, batch_size)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub dataset: String,
    pub model: String,
    pub criterion: Criterion,
    pub metrics: EvalReport,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: ReportFile,
    pub trace: ScoreTrace,
}

/// Evaluates several criteria from one pass of raw scores.
pub fn evaluate_criteria(
    raw: &RawScores,
    labels: &[u8],
    criteria: &[Criterion],
    ratio: f64,
    max_buffer: usize,
    dataset: &str,
    model: &str,
) -> Result<Vec<Evaluation>> {
    criteria
        .iter()
        .map(|&c| {
            let trace = composite_score(&raw.eps_r, raw.eps_s.as_deref(), c)?;
            let ls = LabeledScores::new(&trace.composite, labels)?;
            let metrics = evaluate(ls, ratio, max_buffer)?;
            Ok(Evaluation {
                report: ReportFile {
                    schema_version: SCHEMA_VERSION,
                    dataset: dataset.to_string(),
                    model: model.to_string(),
                    criterion: c,
                    metrics,
                },
                trace,
            })
        })
        .collect()
}

pub fn model_label(model: &RestadModel) -> String {
    if model.config().rbf_enabled {
        format!(
            "restad(rbf@{}, M={})",
            model.config().rbf_position,
            model.config().n_centers
        )
    } else {
        "transformer".to_string()
    }
}

/// Aligned text table in the column order F1, AUC-ROC, AUC-PR, VUS-ROC, VUS-PR.
pub fn render_table(rows: &[(String, &EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}\n",
        "model", "F1", "AUC-ROC", "AUC-PR", "VUS-ROC", "VUS-PR"
    );
    for (name, r) in rows {
        out.push_str(&format!(
            "{name:<width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}\n",
            r.f1, r.auc_roc, r.auc_pr, r.vus_roc, r.vus_pr
        ));
    }
    out
}
