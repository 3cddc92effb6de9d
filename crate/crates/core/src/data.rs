//! Datasets, per-feature standardization, non-overlapping windows, and a
//! synthetic benchmark with planted anomalies.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub const DEFAULT_WINDOW_LEN: usize = 100;

/// Row-major `len x dim` matrix: one row per time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub len: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(len: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if len * dim != values.len() {
            return Err(contract(format!(
                "series of {len} x {dim} needs {} values, got {}",
                len * dim,
                values.len()
            )));
        }
        Ok(Self { len, dim, values })
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(j).step_by(self.dim).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDataset {
    pub name: String,
    pub train: Series,
    pub test: Series,
    pub test_labels: Vec<u8>,
}

impl RawDataset {
    pub fn new(
        name: impl Into<String>,
        train: Series,
        test: Series,
        test_labels: Vec<u8>,
    ) -> Result<Self> {
        if train.dim != test.dim {
            return Err(contract(format!(
                "train has {} features, test has {}",
                train.dim, test.dim
            )));
        }
        if test_labels.len() != test.len {
            return Err(contract(format!(
                "{} labels for {} test points",
                test_labels.len(),
                test.len
            )));
        }
        if let Some(bad) = test_labels.iter().find(|&&l| l > 1) {
            return Err(contract(format!("label {bad} is not 0 or 1")));
        }
        Ok(Self {
            name: name.into(),
            train,
            test,
            test_labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.train.dim
    }
}

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn fit(series: &Series) -> Result<Self> {
        if series.len == 0 {
            return Err(contract("cannot fit statistics on an empty series"));
        }
        let n = series.len as f64;
        let mean: Vec<f64> = (0..series.dim)
            .map(|j| series.column(j).sum::<f64>() / n)
            .collect();
        let std = (0..series.dim)
            .map(|j| {
                let m = mean[j];
                libm::sqrt(series.column(j).map(|v| (v - m) * (v - m)).sum::<f64>() / n)
            })
            .collect();
        Ok(Self { mean, std })
    }

    /// Standardizes; features with zero spread are only centered.
    pub fn apply(&self, series: &Series) -> Series {
        let mut values = series.values.clone();
        for row in values.chunks_exact_mut(series.dim) {
            for (j, v) in row.iter_mut().enumerate() {
                let s = if self.std[j] > 0.0 { self.std[j] } else { 1.0 };
                *v = (*v - self.mean[j]) / s;
            }
        }
        Series {
            len: series.len,
            dim: series.dim,
            values,
        }
    }
}

/// Standardizes both splits with statistics fitted on the training split.
pub fn normalize(raw: &RawDataset) -> Result<RawDataset> {
    let stats = FeatureStats::fit(&raw.train)?;
    Ok(RawDataset {
        name: raw.name.clone(),
        train: stats.apply(&raw.train),
        test: stats.apply(&raw.test),
        test_labels: raw.test_labels.clone(),
    })
}

/// Non-overlapping, contiguous windows; a tail shorter than one window is
/// dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    /// Row-major `[n_windows, window_len, dim]`.
    pub windows: Vec<f64>,
    pub n_windows: usize,
    pub window_len: usize,
    pub dim: usize,
    /// Global start index of each window.
    pub starts: Vec<usize>,
    pub dropped_tail: usize,
}

impl WindowedDataset {
    pub fn window(&self, w: usize) -> &[f64] {
        let size = self.window_len * self.dim;
        &self.windows[w * size..(w + 1) * size]
    }

    /// Windows `start..end`, contiguous in memory.
    pub fn batch(&self, start: usize, end: usize) -> &[f64] {
        let size = self.window_len * self.dim;
        &self.windows[start * size..end * size]
    }

    pub fn batch_ranges(&self, batch_size: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_windows)
            .step_by(batch_size)
            .map(move |s| (s, (s + batch_size).min(self.n_windows)))
    }

    pub fn global_index(&self, w: usize, offset: usize) -> usize {
        self.starts[w] + offset
    }

    /// Number of time points covered by the windows.
    pub fn kept_len(&self) -> usize {
        self.n_windows * self.window_len
    }

    pub fn select(&self, order: &[usize]) -> Vec<f64> {
        order
            .iter()
            .flat_map(|&w| self.window(w).iter().copied())
            .collect()
    }
}

pub fn windowize(series: &Series, window_len: usize) -> Result<WindowedDataset> {
    if window_len == 0 {
        return Err(contract("window length must be positive"));
    }
    if series.len < window_len {
        return Err(contract(format!(
            "series of length {} is shorter than one window of {window_len}",
            series.len
        )));
    }
    let n = series.len / window_len;
    Ok(WindowedDataset {
        windows: series.values[..n * window_len * series.dim].to_vec(),
        n_windows: n,
        window_len,
        dim: series.dim,
        starts: (0..n).map(|w| w * window_len).collect(),
        dropped_tail: series.len - n * window_len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Single-point jump on every feature.
    Spike,
    /// Sustained level shift.
    SubtleDrift,
    /// Fast oscillation superimposed on a segment.
    Subsequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedAnomaly {
    pub kind: AnomalyKind,
    /// Start index within the test split.
    pub position: usize,
    /// Ignored for spikes, which always cover one point.
    #[serde(default = "default_anomaly_len")]
    pub length: usize,
    /// In units of the per-feature signal standard deviation.
    pub magnitude: f64,
}

fn default_anomaly_len() -> usize {
    10
}

impl PlantedAnomaly {
    pub fn span(&self) -> (usize, usize) {
        let len = if self.kind == AnomalyKind::Spike {
            1
        } else {
            self.length
        };
        (self.position, self.position + len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoid {
    pub period: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub name: String,
    pub train_len: usize,
    pub test_len: usize,
    pub dim: usize,
    pub components: Vec<Sinusoid>,
    pub noise_std: f64,
    /// Explicitly placed anomalies.
    pub anomalies: Vec<PlantedAnomaly>,
    /// Significant spikes (6 to 10 sigma) placed at seed-dependent positions.
    pub random_spikes: usize,
    /// Subtle 10-point drifts (1.5 to 2.5 sigma) placed at seed-dependent positions.
    pub random_drifts: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::benchmark(0)
    }
}

/// Minimum spacing between randomly placed anomalies and from the edges.
const PLACEMENT_GAP: usize = 20;

impl SynthSpec {
    /// Two features, a two-sinusoid mixture, noise 0.1, no anomalies.
    pub fn clean(seed: u64) -> Self {
        Self {
            name: String::from("synthetic"),
            train_len: 10_000,
            test_len: 5_000,
            dim: 2,
            components: vec![
                Sinusoid {
                    period: 50.0,
                    amplitude: 1.0,
                },
                Sinusoid {
                    period: 13.0,
                    amplitude: 0.5,
                },
            ],
            noise_std: 0.1,
            anomalies: Vec::new(),
            random_spikes: 0,
            random_drifts: 0,
            seed,
        }
    }

    /// The clean signal with 10 random spikes and 10 random drifts.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            random_spikes: 10,
            random_drifts: 10,
            ..Self::clean(seed)
        }
    }

    /// Explicit anomalies plus the randomly placed ones, sorted by position.
    /// Random placements keep [`PLACEMENT_GAP`] points clear of every other
    /// anomaly and of the split edges.
    pub fn resolved_anomalies(&self) -> Result<Vec<PlantedAnomaly>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x414e_4f4d_414c_5953);
        let mut planted = self.anomalies.clone();
        let kinds = core::iter::repeat_n(AnomalyKind::Spike, self.random_spikes).chain(
            core::iter::repeat_n(AnomalyKind::SubtleDrift, self.random_drifts),
        );
        for kind in kinds {
            let (length, magnitude) = match kind {
                AnomalyKind::Spike => (1, rng.random_range(6.0..10.0)),
                _ => (10, rng.random_range(1.5..2.5)),
            };
            let hi = self.test_len.saturating_sub(length + PLACEMENT_GAP);
            let mut placed = false;
            for _ in 0..10_000 {
                if hi <= PLACEMENT_GAP {
                    break;
                }
                let cand = PlantedAnomaly {
                    kind,
                    position: rng.random_range(PLACEMENT_GAP..hi),
                    length,
                    magnitude,
                };
                let (s, e) = cand.span();
                let clear = planted.iter().all(|p| {
                    let (ps, pe) = p.span();
                    e + PLACEMENT_GAP <= ps || pe + PLACEMENT_GAP <= s
                });
                if clear {
                    planted.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Spec(format!(
                    "no room for {} random anomalies in a test split of {}",
                    self.random_spikes + self.random_drifts,
                    self.test_len
                )));
            }
        }
        planted.sort_by_key(|p| p.position);
        Ok(planted)
    }

    /// Standard deviation of the noisy base signal (per feature).
    pub fn signal_std(&self) -> f64 {
        let power: f64 = self
            .components
            .iter()
            .map(|c| c.amplitude * c.amplitude / 2.0)
            .sum();
        libm::sqrt(power + self.noise_std * self.noise_std)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.train_len == 0 || self.test_len == 0 {
            return Err(Error::Spec(
                "dim, train_len and test_len must be positive".into(),
            ));
        }
        if self
            .components
            .iter()
            .any(|c| !(c.period > 0.0) || !c.amplitude.is_finite())
        {
            return Err(Error::Spec("sinusoid periods must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Spec("noise_std must be non-negative".into()));
        }
        let mut spans: Vec<(usize, usize)> = Vec::new();
        for a in &self.anomalies {
            if !(a.magnitude > 0.0) {
                return Err(Error::Spec(format!(
                    "anomaly at {} has non-positive magnitude",
                    a.position
                )));
            }
            if a.kind != AnomalyKind::Spike && a.length == 0 {
                return Err(Error::Spec(format!(
                    "anomaly at {} has zero length",
                    a.position
                )));
            }
            let (s, e) = a.span();
            if e > self.test_len {
                return Err(Error::Spec(format!(
                    "anomaly [{s}, {e}) exceeds test length {}",
                    self.test_len
                )));
            }
            if let Some((ps, pe)) = spans.iter().find(|(ps, pe)| s < *pe && *ps < e) {
                return Err(Error::Spec(format!(
                    "anomalies [{s}, {e}) and [{ps}, {pe}) overlap"
                )));
            }
            spans.push((s, e));
        }
        Ok(())
    }
}

/// Sinusoid mixture plus Gaussian noise; anomalies go into the test split
/// only and the labels mark exactly the injected indices.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<RawDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Spec(format!("{e}")))?;
    let phases: Vec<f64> = (0..spec.dim * spec.components.len())
        .map(|_| rng.random_range(0.0..core::f64::consts::TAU))
        .collect();
    let base = |t: usize, j: usize| -> f64 {
        // each feature runs at a slightly different tempo
        let stretch = 1.0 + 0.1 * j as f64;
        spec.components
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let angle = core::f64::consts::TAU * t as f64 / (s.period * stretch);
                s.amplitude * libm::sin(angle + phases[j * spec.components.len() + c])
            })
            .sum()
    };
    let mut draw = |offset: usize, len: usize| -> Vec<f64> {
        let mut v = Vec::with_capacity(len * spec.dim);
        for t in 0..len {
            for j in 0..spec.dim {
                v.push(base(offset + t, j) + noise.sample(&mut rng));
            }
        }
        v
    };
    let train = draw(0, spec.train_len);
    let mut test = draw(spec.train_len, spec.test_len);

    let sigma = spec.signal_std();
    let mut labels = vec![0u8; spec.test_len];
    for a in &spec.resolved_anomalies()? {
        let (s, e) = a.span();
        let shift = a.magnitude * sigma;
        for t in s..e {
            labels[t] = 1;
            for j in 0..spec.dim {
                let delta = match a.kind {
                    AnomalyKind::Spike | AnomalyKind::SubtleDrift => shift,
                    AnomalyKind::Subsequence => {
                        shift * libm::sin(core::f64::consts::FRAC_PI_2 * (t - s) as f64 + 0.5)
                    }
                };
                test[t * spec.dim + j] += delta;
            }
        }
    }
    RawDataset::new(
        spec.name.clone(),
        Series::new(spec.train_len, spec.dim, train)?,
        Series::new(spec.test_len, spec.dim, test)?,
        labels,
    )
}
