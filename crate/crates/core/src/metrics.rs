//! Point-wise detection metrics: F1 at a proportion threshold, AUC-ROC,
//! AUC-PR, and their buffered volume-under-surface variants.
//!
//! The AUC routines accept continuous labels in `[0, 1]`. A point with label
//! `w` counts as `w` of a positive and `1 - w` of a negative, which reduces
//! to the usual binary curves when labels are 0/1.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub const DEFAULT_MAX_BUFFER: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct LabeledScores<'a> {
    pub scores: &'a [f64],
    pub labels: &'a [u8],
}

impl<'a> LabeledScores<'a> {
    pub fn new(scores: &'a [f64], labels: &'a [u8]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(contract(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.is_empty() {
            return Err(contract("no points to evaluate"));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(contract("labels must be 0 or 1"));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(contract("scores contain NaN"));
        }
        Ok(Self { scores, labels })
    }

    pub fn n_anomalies(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Indices sorted by score descending, ties by index ascending.
fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    /// Highest score among unflagged points; every flagged point is `>= delta`.
    pub delta: f64,
    pub k: usize,
    pub flagged: Vec<bool>,
}

/// Flags exactly `floor(ratio * n)` points: the highest scores, earliest
/// index first among ties.
pub fn quantile_threshold(scores: &[f64], ratio: f64) -> Result<Threshold> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(contract(format!("anomaly ratio {ratio} outside (0, 1)")));
    }
    let n = scores.len();
    // guard against r*n landing a hair below an integer
    let k = libm::floor(ratio * n as f64 + 1e-9) as usize;
    let k = k.min(n);
    let order = rank_order(scores);
    let mut flagged = vec![false; n];
    for &i in &order[..k] {
        flagged[i] = true;
    }
    let delta = match order.get(k) {
        Some(&i) => scores[i],
        None => f64::NEG_INFINITY,
    };
    Ok(Threshold { delta, k, flagged })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Point-wise counts; no point adjustment.
pub fn f1_at_threshold(labels: &[u8], threshold: &Threshold) -> Result<Confusion> {
    f1_from_predictions(labels, &threshold.flagged)
}

pub fn f1_from_predictions(labels: &[u8], predicted: &[bool]) -> Result<Confusion> {
    if labels.len() != predicted.len() {
        return Err(contract("labels and predictions differ in length"));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&l, &p) in labels.iter().zip(predicted) {
        match (l == 1, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Confusion {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1,
    })
}

/// Cumulative (positive mass, negative mass, count) after each group of
/// tied scores, walking from the highest score down.
fn sweep(scores: &[f64], weights: &[f64]) -> Vec<(f64, f64, usize)> {
    let order = rank_order(scores);
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            let w = weights[order[i]];
            tp += w;
            fp += 1.0 - w;
            i += 1;
        }
        out.push((tp, fp, i));
    }
    out
}

fn masses(weights: &[f64]) -> Result<(f64, f64)> {
    let pos: f64 = weights.iter().sum();
    let neg: f64 = weights.iter().map(|w| 1.0 - w).sum();
    if !(pos > 0.0 && neg > 0.0) {
        return Err(Error::UndefinedMetric(
            "labels need both anomalous and normal points".into(),
        ));
    }
    Ok((pos, neg))
}

/// ROC area with (possibly fractional) labels.
pub fn weighted_auc_roc(scores: &[f64], weights: &[f64]) -> Result<f64> {
    let (pos, neg) = masses(weights)?;
    let mut area = 0.0;
    let (mut tp0, mut fp0) = (0.0, 0.0);
    for (tp, fp, _) in sweep(scores, weights) {
        area += (fp - fp0) * (tp + tp0) / 2.0;
        tp0 = tp;
        fp0 = fp;
    }
    Ok((area / (pos * neg)).clamp(0.0, 1.0))
}

/// PR area with (possibly fractional) labels: trapezoids between the
/// operating points where recall grows, anchored at (recall 0, precision 1).
pub fn weighted_auc_pr(scores: &[f64], weights: &[f64]) -> Result<f64> {
    let (pos, _) = masses(weights)?;
    let mut area = 0.0;
    let (mut r0, mut p0) = (0.0, 1.0);
    let mut tp0 = 0.0;
    for (tp, _, count) in sweep(scores, weights) {
        if tp > tp0 {
            let r = tp / pos;
            let p = tp / count as f64;
            area += (r - r0) * (p + p0) / 2.0;
            r0 = r;
            p0 = p;
            tp0 = tp;
        }
    }
    Ok(area.clamp(0.0, 1.0))
}

fn as_weights(labels: &[u8]) -> Vec<f64> {
    labels.iter().map(|&l| l as f64).collect()
}

pub fn auc_roc(ls: LabeledScores<'_>) -> Result<f64> {
    weighted_auc_roc(ls.scores, &as_weights(ls.labels))
}

pub fn auc_pr(ls: LabeledScores<'_>) -> Result<f64> {
    weighted_auc_pr(ls.scores, &as_weights(ls.labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curve {
    Roc,
    Pr,
}

/// Labels widened by `buffer` points on each side of every anomaly segment.
/// A point `k` steps outside the nearest segment gets `1 - k / (buffer + 1)`.
pub fn smooth_labels(labels: &[u8], buffer: usize) -> Vec<f64> {
    let n = labels.len();
    // distance to the nearest anomalous point, capped at buffer + 1
    let cap = buffer + 1;
    let mut dist = vec![cap; n];
    let mut last = None;
    for t in 0..n {
        if labels[t] == 1 {
            last = Some(t);
        }
        if let Some(a) = last {
            dist[t] = (t - a).min(cap);
        }
    }
    last = None;
    for t in (0..n).rev() {
        if labels[t] == 1 {
            last = Some(t);
        }
        if let Some(a) = last {
            dist[t] = dist[t].min(a - t);
        }
    }
    dist.iter().map(|&d| 1.0 - d as f64 / cap as f64).collect()
}

/// Mean of the buffered AUC over buffers `0..=max_buffer`.
pub fn vus(ls: LabeledScores<'_>, curve: Curve, max_buffer: usize) -> Result<f64> {
    let mut total = 0.0;
    for l in 0..=max_buffer {
        let w = smooth_labels(ls.labels, l);
        total += match curve {
            Curve::Roc => weighted_auc_roc(ls.scores, &w)?,
            Curve::Pr => weighted_auc_pr(ls.scores, &w)?,
        };
    }
    Ok(total / (max_buffer + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub anomaly_ratio: f64,
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub vus_roc: f64,
    pub vus_pr: f64,
    pub n_points: usize,
    pub n_anomalies: usize,
    pub max_buffer: usize,
}

pub fn evaluate(ls: LabeledScores<'_>, ratio: f64, max_buffer: usize) -> Result<EvalReport> {
    let th = quantile_threshold(ls.scores, ratio)?;
    let c = f1_at_threshold(ls.labels, &th)?;
    Ok(EvalReport {
        f1: c.f1,
        precision: c.precision,
        recall: c.recall,
        threshold: th.delta,
        anomaly_ratio: ratio,
        auc_roc: auc_roc(ls)?,
        auc_pr: auc_pr(ls)?,
        vus_roc: vus(ls, Curve::Roc, max_buffer)?,
        vus_pr: vus(ls, Curve::Pr, max_buffer)?,
        n_points: ls.scores.len(),
        n_anomalies: ls.n_anomalies(),
        max_buffer,
    })
}
