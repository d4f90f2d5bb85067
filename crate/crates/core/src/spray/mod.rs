//! Strategy clusters in a collection of explanation heatmaps.
//!
//! Heatmaps are downsized and turned into DFT magnitude spectra, linked into
//! a symmetric kNN graph, and split by spectral clustering with the cluster
//! count read off the Laplacian eigengap. A t-SNE embedding of the graph
//! similarities gives the 2D picture.
//!
//! ```
//! use xil_core::spray::{run_spray, template_heatmaps, SprayConfig};
//!
//! let (maps, truth) = template_heatmaps(40, 0.05, 1);
//! let mut config = SprayConfig::default();
//! config.tsne.iters = 300;
//! let report = run_spray(&maps, None, &config).unwrap();
//! assert_eq!(report.k, 2);
//! assert_eq!(report.labels.len(), truth.len());
//! ```

mod graph;
mod spectrum;
mod tsne;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::normal;
use crate::explain::HeatmapRecord;
use crate::tensor::Tensor;

pub use graph::{
    affinity, canonical_labels, eigengap_k, kmeans, knn_graph, normalized_laplacian, similarity, spectral_cluster, Eigengap,
    Metric,
};
pub use spectrum::{area_resize, dft_magnitude, heatmap_spectrum};
pub use tsne::{tsne, TsneParams, TsneResult};

#[derive(Debug, Error)]
pub enum SprayError {
    #[error("empty heatmap")]
    EmptyHeatmap,
    #[error("heatmap of shape {0:?} is not 2D")]
    NotAnImage(Vec<usize>),
    #[error("{n} points are too few for {k_nn} neighbours")]
    TooFewPoints { n: usize, k_nn: usize },
    #[error("affinity matrix is not symmetric")]
    Asymmetric,
    #[error("eigensolver did not converge in {0} sweeps")]
    EigenFailure(usize),
    #[error("cannot form {k} clusters from {n} points")]
    BadClusterCount { k: usize, n: usize },
    #[error("heatmap {index} has {len} spectrum values, expected {expected}")]
    RaggedFeatures { index: usize, len: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SprayConfig {
    /// Heatmaps are area-averaged to this size before the DFT.
    pub target_size: [usize; 2],
    pub k_nn: usize,
    pub metric: Metric,
    /// `S = 1 / (A + epsilon)`.
    pub epsilon: f64,
    /// Eigenvalues inspected by the eigengap rule.
    pub m_max: usize,
    pub tsne: TsneParams,
    pub seed: u64,
}

impl Default for SprayConfig {
    fn default() -> Self {
        Self {
            target_size: [16, 16],
            k_nn: 8,
            metric: Metric::Euclidean,
            epsilon: 0.05,
            m_max: 10,
            tsne: TsneParams::default(),
            seed: 0,
        }
    }
}

/// Output of [`run_spray`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub eigenvalues: Vec<f64>,
    pub labels: Vec<usize>,
    pub tsne_coords: Vec<[f64; 2]>,
    pub weak_gap: bool,
    pub kl_final: f64,
    /// KL divergence over the last (up to) 100 iterations.
    #[serde(default)]
    pub kl_tail: Vec<f64>,
    /// Heatmap ids in input order, when known.
    #[serde(default)]
    pub instance_ids: Vec<u64>,
    pub config: SprayConfig,
}

/// The full pipeline over `heatmaps` (each `[H, W]` or `[C, H, W]`).
pub fn run_spray(heatmaps: &[Tensor], ids: Option<&[u64]>, config: &SprayConfig) -> Result<ClusterReport, SprayError> {
    let features = heatmaps
        .iter()
        .map(|h| heatmap_spectrum(h, (config.target_size[0], config.target_size[1])))
        .collect::<Result<Vec<_>, _>>()?;
    let n = features.len();
    let c = knn_graph(&features, config.k_nn, config.metric)?;
    let a = affinity(&c, n);
    let gap = eigengap_k(&a, n, config.m_max)?;
    let labels = spectral_cluster(&a, n, gap.k, config.seed)?;
    // Unconnected pairs get 1/eps, connected ones 1/(1+eps): S is used
    // directly as the dissimilarity.
    let mut s = similarity(&a, config.epsilon);
    for i in 0..n {
        s[i * n + i] = 0.0;
    }
    let embedding = tsne(&s, n, &config.tsne, config.seed)?;
    Ok(ClusterReport {
        k: gap.k,
        eigenvalues: gap.eigenvalues,
        labels,
        kl_final: embedding.kl_history.last().copied().unwrap_or(0.0),
        kl_tail: embedding.kl_history[embedding.kl_history.len().saturating_sub(100)..].to_vec(),
        tsne_coords: embedding.coords,
        weak_gap: gap.weak_gap,
        instance_ids: ids.map(<[u64]>::to_vec).unwrap_or_default(),
        config: *config,
    })
}

/// [`run_spray`] over exported heatmap records.
pub fn run_spray_records(records: &[HeatmapRecord], config: &SprayConfig) -> Result<ClusterReport, SprayError> {
    let maps = records
        .iter()
        .map(|r| r.to_tensor().map_err(|_| SprayError::EmptyHeatmap))
        .collect::<Result<Vec<_>, _>>()?;
    let ids: Vec<u64> = records.iter().map(|r| r.instance_id).collect();
    run_spray(&maps, Some(&ids), config)
}

/// Fraction of points whose cluster matches the reference under the best
/// one-to-one relabelling (brute force over label permutations).
pub fn matched_agreement(labels: &[usize], truth: &[usize]) -> f64 {
    let k = labels.iter().chain(truth).max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; k]; k];
    for (&a, &b) in labels.iter().zip(truth) {
        counts[a][b] += 1;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    permutations(&mut perm, 0, &mut |p| {
        best = best.max((0..k).map(|i| counts[i][p[i]]).sum());
    });
    best as f64 / labels.len().max(1) as f64
}

fn permutations(p: &mut Vec<usize>, start: usize, f: &mut impl FnMut(&[usize])) {
    if start == p.len() {
        f(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permutations(p, start + 1, f);
        p.swap(start, i);
    }
}

/// Synthetic 28x28 heatmaps from two strategies: relevance on a 4x4 patch
/// in a random corner, or on a broad central blob. Gaussian noise of the
/// given standard deviation is added to every pixel. Returns the maps and
/// the template index of each.
pub fn template_heatmaps(n: usize, noise: f64, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let t = i % 2;
        let mut v = vec![0.0; 28 * 28];
        if t == 0 {
            let (r0, c0) = [(0, 0), (0, 24), (24, 0), (24, 24)][rng.gen_range(0..4)];
            for r in r0..r0 + 4 {
                for c in c0..c0 + 4 {
                    v[r * 28 + c] = 1.0;
                }
            }
        } else {
            for r in 0..28 {
                for c in 0..28 {
                    let d2 = (r as f64 - 13.5).powi(2) + (c as f64 - 13.5).powi(2);
                    v[r * 28 + c] = (-d2 / (2.0 * 25.0)).exp();
                }
            }
        }
        v.iter_mut().for_each(|x| *x += noise * normal(&mut rng));
        maps.push(Tensor::from_parts(vec![28, 28], v));
        truth.push(t);
    }
    (maps, truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agreement_under_relabelling() {
        assert_eq!(matched_agreement(&[1, 1, 0, 0], &[0, 0, 1, 1]), 1.0);
        assert_eq!(matched_agreement(&[0, 1, 2, 2], &[2, 0, 1, 0]), 0.75);
    }

    #[test]
    fn recovers_two_templates() {
        let (maps, truth) = template_heatmaps(200, 0.05, 4);
        let config = SprayConfig {
            tsne: TsneParams {
                iters: 300,
                ..TsneParams::default()
            },
            ..SprayConfig::default()
        };
        let r = run_spray(&maps, None, &config).unwrap();
        assert_eq!(r.k, 2);
        assert!(matched_agreement(&r.labels, &truth) >= 0.95);
        assert!(r.eigenvalues.iter().all(|&v| (-1e-9..=2.0 + 1e-9).contains(&v)));
        let json = serde_json::to_value(&r).unwrap();
        for key in ["k", "eigenvalues", "labels", "tsne_coords", "config"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn records_and_errors() {
        let (maps, _) = template_heatmaps(12, 0.05, 0);
        let records: Vec<HeatmapRecord> = maps
            .iter()
            .enumerate()
            .map(|(i, m)| HeatmapRecord::new(i as u64 + 100, 0, crate::explain::ExplanationKind::Gradcam, m))
            .collect();
        let config = SprayConfig {
            k_nn: 3,
            tsne: TsneParams {
                iters: 20,
                ..TsneParams::default()
            },
            ..SprayConfig::default()
        };
        let r = run_spray_records(&records, &config).unwrap();
        assert_eq!(r.instance_ids[0], 100);
        assert!(matches!(
            run_spray(&maps[..3], None, &config),
            Err(SprayError::TooFewPoints { .. })
        ));
    }
}
