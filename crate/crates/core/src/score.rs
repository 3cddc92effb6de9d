//! Per-point anomaly scores: reconstruction error, RBF dissimilarity, MinMax
//! normalization and their combinations.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::WindowedDataset;
use crate::error::{contract, shape_err, Error, Result};
use crate::model::RestadModel;
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    ROnly,
    SOnly,
    RPlusS,
    RTimesS,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [Self::ROnly, Self::SOnly, Self::RPlusS, Self::RTimesS];

    pub fn name(self) -> &'static str {
        match self {
            Self::ROnly => "r_only",
            Self::SOnly => "s_only",
            Self::RPlusS => "r_plus_s",
            Self::RTimesS => "r_times_s",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown criterion '{s}'")))
    }

    pub fn needs_similarity(self) -> bool {
        self != Self::ROnly
    }
}

impl core::fmt::Display for Criterion {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Squared L2 norm over features, one value per time point.
pub fn reconstruction_error(x: &[f64], x_hat: &[f64], dim: usize) -> Result<Vec<f64>> {
    if x.len() != x_hat.len() {
        return Err(shape_err(
            "reconstruction_error",
            &[x.len()],
            &[x_hat.len()],
        ));
    }
    if dim == 0 || !x.len().is_multiple_of(dim) {
        return Err(contract(format!(
            "{} values do not split into rows of {dim}",
            x.len()
        )));
    }
    Ok(x.chunks_exact(dim)
        .zip(x_hat.chunks_exact(dim))
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum())
        .collect())
}

/// `1 - mean_m z^m` per time point, from rows of `n_centers` similarities.
pub fn dissimilarity(z: &[f64], n_centers: usize) -> Vec<f64> {
    z.chunks_exact(n_centers)
        .map(|row| 1.0 - row.iter().sum::<f64>() / n_centers as f64)
        .collect()
}

/// Maps to `[0, 1]`; a constant sequence maps to zeros. Returns the bounds.
pub fn minmax(v: &[f64]) -> (Vec<f64>, (f64, f64)) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let out = if span > 0.0 {
        v.iter().map(|x| (x - lo) / span).collect()
    } else {
        alloc::vec![0.0; v.len()]
    };
    (out, (lo, hi))
}

/// Raw score channels over the evaluation set, in time order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawScores {
    pub eps_r: Vec<f64>,
    pub eps_s: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    pub eps_r: Vec<f64>,
    pub eps_s: Option<Vec<f64>>,
    pub composite: Vec<f64>,
    pub criterion: Criterion,
    pub bounds_r: (f64, f64),
    pub bounds_s: Option<(f64, f64)>,
}

impl ScoreTrace {
    pub fn len(&self) -> usize {
        self.composite.len()
    }

    pub fn is_empty(&self) -> bool {
        self.composite.is_empty()
    }
}

/// Normalizes each channel over the whole set, then combines.
pub fn composite_score(
    eps_r: &[f64],
    eps_s: Option<&[f64]>,
    criterion: Criterion,
) -> Result<ScoreTrace> {
    if eps_r.is_empty() {
        return Err(contract("no points to score"));
    }
    if let Some(s) = eps_s {
        if s.len() != eps_r.len() {
            return Err(shape_err("composite_score", &[eps_r.len()], &[s.len()]));
        }
    }
    if criterion.needs_similarity() && eps_s.is_none() {
        return Err(Error::Config(format!(
            "criterion {criterion} needs a model with an RBF layer"
        )));
    }
    let (nr, bounds_r) = minmax(eps_r);
    let ns = eps_s.map(minmax);
    let composite = match (criterion, &ns) {
        (Criterion::ROnly, _) => nr,
        (Criterion::SOnly, Some((s, _))) => s.clone(),
        (Criterion::RPlusS, Some((s, _))) => nr.iter().zip(s).map(|(a, b)| a + b).collect(),
        (Criterion::RTimesS, Some((s, _))) => nr.iter().zip(s).map(|(a, b)| a * b).collect(),
        _ => unreachable!(),
    };
    Ok(ScoreTrace {
        eps_r: eps_r.to_vec(),
        eps_s: eps_s.map(|s| s.to_vec()),
        composite,
        criterion,
        bounds_r,
        bounds_s: ns.map(|(_, b)| b),
    })
}

/// Runs the model over every window and returns per-point raw channels in
/// window order (non-overlapping windows concatenate back to time order).
pub fn score_windows(
    model: &RestadModel,
    data: &WindowedDataset,
    batch_size: usize,
) -> Result<RawScores> {
    let mut eps_r = Vec::with_capacity(data.kept_len());
    let mut eps_s = model
        .rbf
        .as_ref()
        .map(|_| Vec::with_capacity(data.kept_len()));
    for (start, end) in data.batch_ranges(batch_size.max(1)) {
        let mut tape = Tape::new();
        let input = data.batch(start, end);
        let x = tape.leaf(
            &[end - start, data.window_len, data.dim],
            input.to_vec(),
            false,
        )?;
        let out = model.forward(&mut tape, x, false, None)?;
        eps_r.extend(reconstruction_error(
            input,
            tape.value(out.reconstruction),
            data.dim,
        )?);
        if let (Some(z), Some(acc)) = (out.similarity, eps_s.as_mut()) {
            let m = *tape.shape(z).last().unwrap();
            acc.extend(dissimilarity(tape.value(z), m));
        }
    }
    Ok(RawScores { eps_r, eps_s })
}
