//! Turning explanation corrections into learning signal.
//!
//! A [`Correction`] names the explanation components a user marked as
//! irrelevant. It can be fed back either as counterexamples (copies of the
//! instance with those components replaced, model-agnostic) or as a binary
//! mask for the gradient penalty in [`rrr_loss`].

mod counterexamples;
mod log;
pub(crate) mod rrr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explain::ComponentScheme;
use crate::models::{LabeledSet, Model, ModelError, RrrTarget};
use crate::tensor::Tensor;

pub use counterexamples::{to_counterexamples, CeStrategy, CeVariant, FeatureStats};
pub use log::{FeedbackLog, FeedbackRecord};
pub use rrr::{rrr_loss, RrrLoss};

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("component {index} out of range for a scheme of {len} components")]
    InvalidComponent { index: usize, len: usize },
    #[error("no training example of class {0} to substitute from")]
    NoDonor(usize),
    #[error("reasons term is zero")]
    ZeroReasons,
    #[error("counterexample count must be at least 1")]
    ZeroCount,
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("feedback log: {0}")]
    Io(#[from] std::io::Error),
    #[error("feedback log: {0}")]
    Json(#[from] serde_json::Error),
}

/// The user's answer to one query: the corrected label and the set of
/// explanation components they consider irrelevant (possibly empty).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correction {
    pub instance_id: u64,
    pub label: usize,
    pub components: Vec<usize>,
}

impl Correction {
    pub fn new(instance_id: u64, label: usize, mut components: Vec<usize>) -> Self {
        components.sort_unstable();
        components.dedup();
        Self {
            instance_id,
            label,
            components,
        }
    }

    pub fn validate(&self, scheme: &ComponentScheme) -> Result<(), FeedbackError> {
        match self.components.iter().find(|&&j| j >= scheme.len()) {
            Some(&index) => Err(FeedbackError::InvalidComponent {
                index,
                len: scheme.len(),
            }),
            None => Ok(()),
        }
    }
}

/// Where a gradient-penalty mask lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MaskTarget {
    Input,
    /// The last-conv activation grid, `grid_h x grid_w`.
    LastConv { grid_h: usize, grid_w: usize },
}

/// Binary mask over the input (same shape) or over the last-conv grid
/// (`[grid_h, grid_w]`). Ones mark penalized positions.
pub fn to_mask(correction: &Correction, scheme: &ComponentScheme, target: MaskTarget) -> Result<Tensor, FeedbackError> {
    correction.validate(scheme)?;
    let mut input = vec![0.0; scheme.input_len()];
    for &j in &correction.components {
        for &i in scheme.indices(j) {
            input[i] = 1.0;
        }
    }
    match target {
        MaskTarget::Input => Ok(Tensor::from_parts(scheme.input_shape.clone(), input)),
        MaskTarget::LastConv { grid_h, grid_w } => Ok(downsample_mask(&input, &scheme.input_shape, grid_h, grid_w)),
    }
}

/// A grid cell is one iff any masked input pixel (in any channel) falls in
/// the block of pixels that maps onto it.
pub fn downsample_mask(input: &[f64], input_shape: &[usize], grid_h: usize, grid_w: usize) -> Tensor {
    let (c, h, w) = match input_shape {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        _ => (1, 1, input.len()),
    };
    let mut out = vec![0.0; grid_h * grid_w];
    for ch in 0..c {
        for r in 0..h {
            for q in 0..w {
                if input[(ch * h + r) * w + q] != 0.0 {
                    let gr = (r * grid_h / h).min(grid_h - 1);
                    let gq = (q * grid_w / w).min(grid_w - 1);
                    out[gr * grid_w + gq] = 1.0;
                }
            }
        }
    }
    Tensor::from_parts(vec![grid_h, grid_w], out)
}

/// Answers and unweighted reasons terms summed over `data`, whose masks
/// must align with `target`.
pub fn evaluate_rrr_terms(model: &Model, data: &LabeledSet, class_weights: &[f64], target: RrrTarget) -> Result<(f64, f64), FeedbackError> {
    Ok(rrr::evaluate_terms(model, data, class_weights, target)?)
}

/// `lambda1 = answers / reasons`, clamped to `[1e-4, 1e6]`, so both terms
/// start at a similar magnitude.
pub fn calibrate_lambda1(answers: f64, reasons: f64) -> Result<f64, FeedbackError> {
    if !(reasons > 0.0) || !reasons.is_finite() {
        return Err(FeedbackError::ZeroReasons);
    }
    Ok((answers / reasons).clamp(1e-4, 1e6))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_correction_gives_zero_mask() {
        let s = ComponentScheme::image_grid(&[4, 4], 2, 2).unwrap();
        let m = to_mask(&Correction::new(0, 0, vec![]), &s, MaskTarget::Input).unwrap();
        assert_eq!(m.shape(), &[4, 4]);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn background_correction_marks_background() {
        // "tissue" is the centre 2x2 patch of a 6x6 image in 2x2 patches;
        // every other component is background.
        let s = ComponentScheme::image_grid(&[6, 6], 2, 2).unwrap();
        let background: Vec<usize> = (0..9).filter(|&j| j != 4).collect();
        let m = to_mask(&Correction::new(0, 1, background), &s, MaskTarget::Input).unwrap();
        for r in 0..6 {
            for q in 0..6 {
                let tissue = (2..4).contains(&r) && (2..4).contains(&q);
                assert_eq!(m.data()[r * 6 + q], if tissue { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn top_left_patch_maps_to_top_left_conv_cell() {
        let s = ComponentScheme::image_grid(&[4, 4], 2, 2).unwrap();
        let m = to_mask(
            &Correction::new(0, 0, vec![0]),
            &s,
            MaskTarget::LastConv { grid_h: 2, grid_w: 2 },
        )
        .unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn out_of_range_component() {
        let s = ComponentScheme::tabular(3).unwrap();
        let err = to_mask(&Correction::new(0, 0, vec![3]), &s, MaskTarget::Input).unwrap_err();
        assert!(matches!(err, FeedbackError::InvalidComponent { index: 3, len: 3 }));
    }

    #[test]
    fn lambda1_calibration() {
        assert!((calibrate_lambda1(2.0, 0.1).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(calibrate_lambda1(0.7, 0.7).unwrap(), 1.0);
        assert!(matches!(calibrate_lambda1(1.0, 0.0), Err(FeedbackError::ZeroReasons)));
        assert_eq!(calibrate_lambda1(1e9, 1.0).unwrap(), 1e6);
        assert_eq!(calibrate_lambda1(1e-9, 1.0).unwrap(), 1e-4);
    }
}
