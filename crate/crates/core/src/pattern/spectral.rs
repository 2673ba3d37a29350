//! Similarity graph, normalized Laplacian and k-means on its bottom eigenvectors.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ssc::SelfExpressCoeffs;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SimilarityGraph {
    /// `|C| + |C|^T`
    pub wg: DMatrix<f64>,
    /// `I - D^{-1/2} W D^{-1/2}`, isolated nodes use `D_ii = 1`.
    pub lw: DMatrix<f64>,
}

pub fn build_similarity(coeffs: &SelfExpressCoeffs) -> SimilarityGraph {
    similarity_from_coefficients(&coeffs.csc)
}

pub fn similarity_from_coefficients(csc: &DMatrix<f64>) -> SimilarityGraph {
    let abs = csc.abs();
    let wg = &abs + abs.transpose();
    similarity_from_weights(wg)
}

pub fn similarity_from_weights(wg: DMatrix<f64>) -> SimilarityGraph {
    let n = wg.nrows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d = wg.row(i).sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let lw = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * wg[(i, j)] * inv_sqrt[j]
    });
    SimilarityGraph { wg, lw }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansParams {
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
    /// Extra seeding attempts per restart when a cluster ends up empty.
    pub reseed_attempts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            restarts: 50,
            max_iter: 300,
            seed: 7,
            reseed_attempts: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: DMatrix<f64>,
    pub inertia: f64,
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>, k: usize) -> f64 {
    points
        .row(i)
        .iter()
        .zip(centers.row(k).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// k-means++ seeding; `None` when fewer than `k` distinct positions exist.
fn seed_centers(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Option<DMatrix<f64>> {
    let (n, d) = points.shape();
    let mut centers = DMatrix::zeros(k, d);
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from(&points.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in dist.iter().enumerate() {
            if target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        if dist[pick] <= 0.0 {
            // floating leftovers landed on an already chosen point
            pick = dist
                .iter()
                .enumerate()
                .rev()
                .find(|(_, &w)| w > 0.0)
                .map(|(i, _)| i)?;
        }
        centers.row_mut(c).copy_from(&points.row(pick));
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(points, i, &centers, c));
        }
    }
    Some(centers)
}

/// Lloyd iterations; `None` if a cluster empties.
fn lloyd(points: &DMatrix<f64>, mut centers: DMatrix<f64>, max_iter: usize) -> Option<KMeansResult> {
    let (n, d) = points.shape();
    let k = centers.nrows();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let dd = sq_dist(points, i, &centers, c);
                if dd < best.0 {
                    best = (dd, c);
                }
            }
            if *label != best.1 {
                *label = best.1;
                changed = true;
            }
        }
        let mut sums = DMatrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            let mut row = sums.row_mut(l);
            row += points.row(i);
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            let mean = sums.row(c) / counts[c] as f64;
            centers.row_mut(c).copy_from(&mean);
        }
        if !changed {
            break;
        }
    }
    let inertia = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(points, i, &centers, l))
        .sum();
    Some(KMeansResult {
        labels,
        centers,
        inertia,
    })
}

/// k-means over the rows of `points`, best inertia over `params.restarts`.
pub fn kmeans(points: &DMatrix<f64>, k: usize, params: &KMeansParams) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k-means needs 1 <= k <= {n}, got {k}")));
    }
    if k == 1 {
        let mean = points.row_mean();
        let centers = DMatrix::from_row_slice(1, points.ncols(), mean.as_slice());
        let inertia = (0..n).map(|i| sq_dist(points, i, &centers, 0)).sum();
        return Ok(KMeansResult {
            labels: vec![0; n],
            centers,
            inertia,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<KMeansResult> = None;
    for restart in 0..params.restarts.max(1) {
        let mut run = None;
        for _ in 0..=params.reseed_attempts {
            if let Some(centers) = seed_centers(points, k, &mut rng) {
                run = lloyd(points, centers, params.max_iter);
                if run.is_some() {
                    break;
                }
            }
        }
        let Some(run) = run else {
            return Err(Error::Convergence(format!(
                "k-means restart {restart}: empty cluster after {} seedings",
                params.reseed_attempts + 1
            )));
        };
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Row-normalized embedding in the `c` eigenvectors of `Lw` with smallest eigenvalues.
pub fn spectral_embedding(graph: &SimilarityGraph, c: usize) -> DMatrix<f64> {
    let n = graph.lw.nrows();
    let eig = SymmetricEigen::new(graph.lw.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mut emb = DMatrix::zeros(n, c);
    for (k, &col) in order.iter().take(c).enumerate() {
        emb.column_mut(k).copy_from(&eig.eigenvectors.column(col));
    }
    for mut row in emb.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    emb
}

/// Cluster labels in `0..c`, every label used.
pub fn spectral_cluster(graph: &SimilarityGraph, c: usize, params: &KMeansParams) -> Result<Vec<usize>> {
    let n = graph.lw.nrows();
    if c == 0 || c > n {
        return Err(Error::Config(format!("cluster count must be in 1..={n}, got {c}")));
    }
    if c == 1 {
        return Ok(vec![0; n]);
    }
    let emb = spectral_embedding(graph, c);
    Ok(kmeans(&emb, c, params)?.labels)
}
