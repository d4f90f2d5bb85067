use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SprayError;
use crate::linalg::{jacobi_eigen, LinalgError, SymmetricEigen, JACOBI_MAX_SWEEPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    Euclidean,
    Cityblock,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Cityblock => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        }
    }
}

/// Row-major `n x n` 0/1 adjacency: `C[i][j] = 1` iff `j` is among the
/// `k_nn` nearest points of `i` (self excluded, distance ties to the lower
/// index).
pub fn knn_graph(features: &[Vec<f64>], k_nn: usize, metric: Metric) -> Result<Vec<f64>, SprayError> {
    let n = features.len();
    if k_nn == 0 || n <= k_nn {
        return Err(SprayError::TooFewPoints { n, k_nn });
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (metric.distance(&features[i], &features[j]), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut row = vec![0.0; n];
            for &(_, j) in &d[..k_nn] {
                row[j] = 1.0;
            }
            row
        })
        .collect();
    Ok(rows.concat())
}

/// `A = max(C, C^T)` elementwise.
pub fn affinity(c: &[f64], n: usize) -> Vec<f64> {
    let mut a = c.to_vec();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = c[i * n + j].max(c[j * n + i]);
        }
    }
    a
}

/// `S = 1 / (A + eps)` elementwise.
pub fn similarity(a: &[f64], eps: f64) -> Vec<f64> {
    a.iter().map(|v| 1.0 / (v + eps)).collect()
}

fn check_symmetric(a: &[f64], n: usize) -> Result<(), SprayError> {
    for i in 0..n {
        for j in 0..i {
            if a[i * n + j] != a[j * n + i] {
                return Err(SprayError::Asymmetric);
            }
        }
    }
    Ok(())
}

/// `L = I - D^-1/2 A D^-1/2`. Isolated vertices get an identity row and
/// column.
pub fn normalized_laplacian(a: &[f64], n: usize) -> Result<Vec<f64>, SprayError> {
    check_symmetric(a, n)?;
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = a[i * n..(i + 1) * n].iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let id = if i == j { 1.0 } else { 0.0 };
            l[i * n + j] = id - inv_sqrt[i] * a[i * n + j] * inv_sqrt[j];
        }
    }
    Ok(l)
}

fn eigen(l: &[f64], n: usize) -> Result<SymmetricEigen, SprayError> {
    jacobi_eigen(l, n).map_err(|e| match e {
        LinalgError::NoConvergence(s) => SprayError::EigenFailure(s),
        LinalgError::Asymmetric => SprayError::Asymmetric,
        LinalgError::NotPositiveDefinite => SprayError::EigenFailure(JACOBI_MAX_SWEEPS),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eigengap {
    pub k: usize,
    /// The `m_max` smallest Laplacian eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    /// The largest gap was below the second eigenvalue, so `k = 2` was
    /// forced.
    pub weak_gap: bool,
}

/// Cluster count from the largest gap between consecutive eigenvalues of
/// the normalized Laplacian of `a`, at least 2.
pub fn eigengap_k(a: &[f64], n: usize, m_max: usize) -> Result<Eigengap, SprayError> {
    let l = normalized_laplacian(a, n)?;
    let eig = eigen(&l, n)?;
    let m = m_max.min(n);
    let values = eig.values[..m].to_vec();
    let mut best = (1, f64::NEG_INFINITY);
    for i in 1..m {
        let gap = values[i] - values[i - 1];
        if gap > best.1 {
            best = (i, gap);
        }
    }
    let weak_gap = best.0 < 2;
    Ok(Eigengap {
        k: best.0.max(2).min(n),
        eigenvalues: values,
        weak_gap,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One k-means++ seeded Lloyd run; returns labels and inertia.
fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = points.len();
    let mut centers = vec![points[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            while d2[pick] == 0.0 && pick > 0 {
                pick -= 1;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .expect("k >= 1");
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
    (labels, inertia)
}

/// Best-inertia k-means over `restarts` k-means++ initialisations. Labels
/// are renumbered in order of first appearance.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let run = kmeans_once(points, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }
    canonical_labels(&best.expect("at least one run").0)
}

pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Spectral clustering of affinity `a`: rows of the `k` smallest
/// Laplacian eigenvectors, normalized to unit length, grouped by k-means.
pub fn spectral_cluster(a: &[f64], n: usize, k: usize, seed: u64) -> Result<Vec<usize>, SprayError> {
    if k < 2 || k > n {
        return Err(SprayError::BadClusterCount { k, n });
    }
    let l = normalized_laplacian(a, n)?;
    let eig = eigen(&l, n)?;
    let points: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let row: Vec<f64> = (0..k).map(|c| eig.vectors[r * n + c]).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter().map(|v| v / norm).collect()
            } else {
                row
            }
        })
        .collect();
    Ok(kmeans(&points, k, 10, seed))
}
