//! RBF layer initialization.
//!
//! Two strategies: standard-normal draws for the centers and `gamma`, or
//! K-means over the latents of a pretrained model without an RBF layer, with
//! `gamma` derived from the mean squared distance to the nearest center.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::WindowedDataset;
use crate::error::{contract, Error, Result};
use crate::model::{RbfLayer, RestadModel};
use crate::tensor::{Tape, Tensor};

/// Centers and `gamma` from N(0, 1), deterministic per seed.
pub fn random_init(n_centers: usize, dim: usize, seed: u64) -> RbfLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..n_centers * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let gamma: f64 = StandardNormal.sample(&mut rng);
    let centers = Tensor::new(&[n_centers, dim], centers).expect("sized");
    RbfLayer::new(centers, gamma).expect("rank 2")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    /// Row-major `[n_clusters, dim]`.
    pub centers: Vec<f64>,
    pub dim: usize,
    pub assignments: Vec<usize>,
    /// Total squared distance of every point to its assigned center.
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations_run: usize,
}

impl KMeansResult {
    pub fn n_clusters(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn center(&self, m: usize) -> &[f64] {
        &self.centers[m * self.dim..(m + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest center (ties go to the lower index).
fn nearest(point: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (m, c) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (m, d);
        }
    }
    best
}

fn plus_plus_seed(points: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| sq_dist(p, &centers[..dim]))
        .collect();
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // every point coincides with a chosen center
            rng.random_range(0..n)
        };
        let c = points[pick * dim..(pick + 1) * dim].to_vec();
        for (i, p) in points.chunks_exact(dim).enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centers.extend_from_slice(&c);
    }
    centers
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops after `max_iter` assignment steps or once the inertia improves by
/// less than `tol`. A cluster that ends up empty is re-seeded at the point
/// farthest from its current center, which can only lower the inertia.
/// The returned centers are the ones the final assignment was made against.
pub fn kmeans(
    points: &[f64],
    dim: usize,
    n_clusters: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<KMeansResult> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(contract(format!(
            "{} values do not form rows of width {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if n_clusters == 0 || n < n_clusters {
        return Err(contract(format!(
            "kmeans needs at least {n_clusters} points, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_seed(points, dim, n_clusters, &mut rng);
    let mut assignments = vec![0; n];
    let mut dists = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;

    loop {
        iterations += 1;
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let (m, d) = nearest(p, &centers, dim);
            assignments[i] = m;
            dists[i] = d;
        }
        let inertia: f64 = dists.iter().sum();
        let improvement = trace.last().map(|prev: &f64| prev - inertia);
        trace.push(inertia);
        if iterations >= max_iter || improvement.is_some_and(|d| d < tol) {
            break;
        }

        let mut sums = vec![0.0; n_clusters * dim];
        let mut counts = vec![0usize; n_clusters];
        for (p, &m) in points.chunks_exact(dim).zip(&assignments) {
            counts[m] += 1;
            for (s, v) in sums[m * dim..(m + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        for m in 0..n_clusters {
            if counts[m] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= 1");
                centers[m * dim..(m + 1) * dim]
                    .copy_from_slice(&points[far * dim..(far + 1) * dim]);
                dists[far] = 0.0;
            } else {
                for q in 0..dim {
                    centers[m * dim + q] = sums[m * dim + q] / counts[m] as f64;
                }
            }
        }
    }

    Ok(KMeansResult {
        inertia: *trace.last().expect("at least one iteration"),
        centers,
        dim,
        assignments,
        inertia_trace: trace,
        iterations_run: iterations,
    })
}

/// Mean squared distance from each point to its nearest center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaTilde(pub f64);

pub fn sigma_tilde(points: &[f64], centers: &[f64], dim: usize) -> Result<SigmaTilde> {
    if dim == 0
        || !points.len().is_multiple_of(dim)
        || !centers.len().is_multiple_of(dim)
        || centers.is_empty()
    {
        return Err(contract(
            "sigma_tilde: points and centers must be non-empty rows of equal width",
        ));
    }
    let n = points.len() / dim;
    if n == 0 {
        return Err(contract("sigma_tilde: no points"));
    }
    let total: f64 = points
        .chunks_exact(dim)
        .map(|p| nearest(p, centers, dim).1)
        .sum();
    Ok(SigmaTilde(total / n as f64))
}

/// How the initial `gamma` is derived from sigma-tilde squared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaInitMode {
    /// `gamma = 1 / sigma2`, so the effective scale is `e^(1 / sigma2)`.
    #[default]
    Reciprocal,
    /// `gamma = ln(1 / sigma2)`, so the effective scale is exactly `1 / sigma2`.
    LogConsistent,
}

impl GammaInitMode {
    pub fn gamma(self, sigma: SigmaTilde) -> f64 {
        match self {
            Self::Reciprocal => 1.0 / sigma.0,
            Self::LogConsistent => -libm::log(sigma.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansInitConfig {
    pub n_centers: usize,
    /// 1-based encoder layer whose output the RBF layer will consume.
    pub rbf_position: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    pub gamma_mode: GammaInitMode,
    /// Above this many latent points, K-means runs on a uniform subsample.
    pub max_points: usize,
    pub batch_size: usize,
}

impl Default for KMeansInitConfig {
    fn default() -> Self {
        Self {
            n_centers: 32,
            rbf_position: 2,
            max_iter: 100,
            tol: 1e-6,
            seed: 0,
            gamma_mode: GammaInitMode::Reciprocal,
            max_points: 100_000,
            batch_size: 32,
        }
    }
}

/// Latent vectors `h_{i,t}` of every window at the output of encoder layer
/// `position`, pooled into rows of width `d_model`.
pub fn collect_latents(
    model: &RestadModel,
    data: &WindowedDataset,
    position: usize,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (start, end) in data.batch_ranges(batch_size.max(1)) {
        let mut tape = Tape::new();
        let x = tape.leaf(
            &[end - start, data.window_len, data.dim],
            data.batch(start, end).to_vec(),
            false,
        )?;
        let h = model.hidden_at(&mut tape, x, position)?;
        out.extend_from_slice(tape.value(h));
    }
    Ok(out)
}

/// Fits RBF centers to the latents of `base` (a model without an RBF layer)
/// and sets `gamma` from sigma-tilde squared.
pub fn kmeans_init(
    base: &RestadModel,
    data: &WindowedDataset,
    config: &KMeansInitConfig,
) -> Result<RbfLayer> {
    if base.config().rbf_enabled {
        return Err(Error::Config(
            "K-means init expects a base model without an RBF layer".into(),
        ));
    }
    let dim = base.config().d_model;
    let mut latents = collect_latents(base, data, config.rbf_position, config.batch_size)?;
    let n = latents.len() / dim;
    if n > config.max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5355_4253_414d_504c);
        let mut picks = index::sample(&mut rng, n, config.max_points).into_vec();
        picks.sort_unstable();
        latents = picks
            .iter()
            .flat_map(|&i| latents[i * dim..(i + 1) * dim].iter().copied())
            .collect();
    }
    let km = kmeans(
        &latents,
        dim,
        config.n_centers,
        config.max_iter,
        config.tol,
        config.seed,
    )?;
    let sigma = sigma_tilde(&latents, &km.centers, dim)?;
    if !(sigma.0 > 1e-12) {
        return Err(Error::DegenerateInit(format!(
            "mean squared distance to nearest center is {:e}",
            sigma.0
        )));
    }
    let gamma = config.gamma_mode.gamma(sigma);
    RbfLayer::new(Tensor::new(&[config.n_centers, dim], km.centers)?, gamma)
}
