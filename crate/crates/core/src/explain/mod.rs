//! Local explainers: a sampled linear surrogate over interpretable
//! components, raw input gradients, and Grad-CAM.

mod export;
mod gradients;
mod lime;
mod scheme;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::LinalgError;
use crate::models::ModelError;
use crate::tensor::Tensor;

pub use export::{read_heatmaps_csv, read_heatmaps_dir, write_heatmaps_csv, HeatmapRecord};
pub use gradients::{bilinear_resize, gradcam, input_gradient};
pub(crate) use lime::perturbed_batch;
pub use lime::{lime_explain, stable_lime, LimeParams};
pub use scheme::{ComponentScheme, Rect, SchemeKind};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("invalid component scheme: {0}")]
    InvalidScheme(String),
    #[error("scheme covers {scheme:?} but the instance has shape {instance:?}")]
    SchemeMismatch { scheme: Vec<usize>, instance: Vec<usize> },
    #[error("all perturbation masks are identical")]
    DegenerateSamples,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("Grad-CAM needs a convolutional model")]
    NotConvModel,
    #[error("class {class} out of range for {classes} classes")]
    BadClass { class: usize, classes: usize },
    #[error("runs must be at least 1")]
    ZeroRuns,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("heatmap i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplanationKind {
    Surrogate,
    InputGradient,
    Gradcam,
}

/// An explanation of one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub kind: ExplanationKind,
    /// The class being explained.
    pub class: usize,
    /// Per-component weights: surrogate coefficients, or summed absolute
    /// heatmap relevance per component for pixel explainers.
    pub weights: Vec<f64>,
    /// Per-pixel relevance in input geometry (pixel explainers only).
    pub heatmap: Option<Tensor>,
    /// Up to `k` components with the largest `|weight|`, all nonzero.
    pub top_k: Vec<usize>,
    /// Surrogate intercept and weighted R^2 (surrogate only).
    pub intercept: Option<f64>,
    pub score: Option<f64>,
}

/// Indices of the `k` largest `|w|`, excluding zeros; ties go to the lower
/// index.
pub fn top_k_by_magnitude(weights: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).filter(|&j| weights[j] != 0.0).collect();
    idx.sort_by(|&a, &b| weights[b].abs().total_cmp(&weights[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Wraps a per-pixel heatmap as an explanation, ranking components by the
/// absolute relevance they contain.
pub fn heatmap_explanation(kind: ExplanationKind, class: usize, heatmap: Tensor, scheme: &ComponentScheme, k: usize) -> Explanation {
    let abs: Vec<f64> = heatmap.data().iter().map(|v| v.abs()).collect();
    let weights = scheme.aggregate(&abs);
    let top_k = top_k_by_magnitude(&weights, k);
    Explanation {
        kind,
        class,
        weights,
        heatmap: Some(heatmap),
        top_k,
        intercept: None,
        score: None,
    }
}
