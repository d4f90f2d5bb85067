use serde::{Deserialize, Serialize};

use super::FeedbackError;
use crate::autodiff::{Tape, Var};
use crate::models::{LabeledSet, Model, ModelError, RrrTarget};
use crate::tensor::Tensor;

pub(crate) struct LossTerms {
    pub params: Vec<Var>,
    /// `sum_n sum_k -c_k y_nk log p_nk`
    pub answers: Var,
    /// `sum_n sum_d (A_nd * d/dt_nd sum_k c_k log p_nk)^2`, unweighted.
    pub reasons: Option<Var>,
    /// `sum_i theta_i^2`
    pub l2: Var,
}

/// Records the three loss terms for `batch` on `tape`. With `target` unset
/// the reasons term is skipped.
pub(crate) fn loss_terms(
    model: &Model,
    tape: &Tape,
    batch: &LabeledSet,
    class_weights: &[f64],
    target: Option<RrrTarget>,
) -> Result<LossTerms, ModelError> {
    let k = model.spec.classes;
    let n = batch.len();
    if class_weights.len() != k {
        return Err(ModelError::ShapeMismatch(format!("{} class weights for {k} classes", class_weights.len())));
    }
    let fp = model.forward(tape, &batch.x)?;
    let logp = fp.logits.log_softmax()?;

    let mut picked = vec![0.0; n * k];
    for (row, &y) in batch.labels.iter().enumerate() {
        if y >= k {
            return Err(ModelError::ShapeMismatch(format!("label {y} >= {k} classes")));
        }
        picked[row * k + y] = -class_weights[y];
    }
    let answers = logp.mask_mul(&Tensor::from_parts(vec![n, k], picked))?.sum()?;

    let reasons = match target {
        None => None,
        Some(target) => {
            let masks = batch
                .masks
                .as_ref()
                .ok_or_else(|| ModelError::ShapeMismatch("gradient penalty requires masks".into()))?;
            let wrt = match target {
                RrrTarget::Input => fp.input.clone(),
                RrrTarget::LastConv => fp
                    .last_conv
                    .clone()
                    .ok_or_else(|| ModelError::InvalidSpec("last-conv penalty needs a CNN".into()))?,
            };
            let all_weights = Tensor::from_parts(vec![n, k], class_weights.iter().copied().cycle().take(n * k).collect());
            let s = logp.mask_mul(&all_weights)?.sum()?;
            let grad = tape.gradient(&s, &[&wrt], true)?.remove(0).var;
            let mask = align_mask(masks, &grad.shape())?;
            Some(grad.mask_mul(&mask)?.square()?.sum()?)
        }
    };

    let mut l2: Option<Var> = None;
    for p in &fp.params {
        let sq = p.square()?.sum()?;
        l2 = Some(match l2 {
            Some(acc) => acc.add(&sq)?,
            None => sq,
        });
    }
    Ok(LossTerms {
        params: fp.params,
        answers,
        reasons,
        l2: l2.expect("every model has parameters"),
    })
}

/// Masks are stored per instance either in the target's own shape, or as a
/// `[N, gh, gw]` grid that is shared by every channel of a `[N, C, gh, gw]`
/// activation.
fn align_mask(masks: &Tensor, target_shape: &[usize]) -> Result<Tensor, ModelError> {
    if masks.len() == target_shape.iter().product::<usize>() {
        return Ok(Tensor::from_parts(target_shape.to_vec(), masks.data().to_vec()));
    }
    if let [n, c, h, w] = *target_shape {
        if masks.len() == n * h * w {
            let mut data = Vec::with_capacity(n * c * h * w);
            for row in masks.data().chunks(h * w) {
                for _ in 0..c {
                    data.extend_from_slice(row);
                }
            }
            return Ok(Tensor::from_parts(target_shape.to_vec(), data));
        }
    }
    Err(ModelError::ShapeMismatch(format!(
        "masks {:?} do not align with penalty target {target_shape:?}",
        masks.shape()
    )))
}

/// Answers and (unweighted) reasons terms summed over all of `data`.
pub(crate) fn evaluate_terms(
    model: &Model,
    data: &LabeledSet,
    class_weights: &[f64],
    target: RrrTarget,
) -> Result<(f64, f64), ModelError> {
    let mut answers = 0.0;
    let mut reasons = 0.0;
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(256) {
        let tape = Tape::new();
        let terms = loss_terms(model, &tape, &data.subset(chunk), class_weights, Some(target))?;
        answers += terms.answers.item();
        reasons += terms.reasons.map_or(0.0, |r| r.item());
    }
    Ok((answers, reasons))
}

/// The three-term objective evaluated on one batch, with its parameter
/// gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrrLoss {
    pub loss: f64,
    pub answers: f64,
    pub reasons: f64,
    pub l2: f64,
    /// `d loss / d theta`, in model parameter order.
    pub grads: Vec<Tensor>,
}

/// `loss = answers + lambda1 * reasons + lambda2 * sum(theta^2)` where
/// answers is class-weighted cross-entropy and reasons is the squared
/// masked gradient of `sum_k c_k log p_k` with respect to `target`.
pub fn rrr_loss(
    model: &Model,
    batch: &LabeledSet,
    lambda1: f64,
    lambda2: f64,
    class_weights: &[f64],
    target: RrrTarget,
) -> Result<RrrLoss, FeedbackError> {
    let tape = Tape::new();
    let terms = loss_terms(model, &tape, batch, class_weights, Some(target))?;
    let reasons = terms.reasons.expect("target is set");
    let loss = terms
        .answers
        .add(&reasons.scale(lambda1).map_err(ModelError::from)?)
        .and_then(|v| v.add(&terms.l2.scale(lambda2)?))
        .map_err(ModelError::from)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(FeedbackError::NonFinite(format!(
            "answers {} reasons {} l2 {}",
            terms.answers.item(),
            reasons.item(),
            terms.l2.item()
        )));
    }
    let refs: Vec<&Var> = terms.params.iter().collect();
    let grads = tape
        .gradient(&loss, &refs, false)
        .map_err(ModelError::from)?
        .into_iter()
        .map(|g| (*g.var.value()).clone())
        .collect();
    Ok(RrrLoss {
        loss: value,
        answers: terms.answers.item(),
        reasons: reasons.item(),
        l2: terms.l2.item(),
        grads,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use crate::models::{Architecture, ModelSpec};

    fn random_batch(n: usize, shape: &[usize], seed: u64) -> LabeledSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: usize = shape.iter().product();
        let mut full = vec![n];
        full.extend_from_slice(shape);
        LabeledSet {
            x: Tensor::new(full.clone(), (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            labels: (0..n).map(|i| i % 2).collect(),
            masks: Some(Tensor::new(full, (0..n * d).map(|_| rng.gen_bool(0.4) as u8 as f64).collect()).unwrap()),
        }
    }

    #[test]
    fn reduces_to_weighted_cross_entropy() {
        let model = Model::init(ModelSpec::mlp(vec![3, 4, 2]), 1).unwrap();
        let batch = random_batch(5, &[3], 2);
        let w = [0.7, 1.6];
        let r = rrr_loss(&model, &batch, 0.0, 0.0, &w, RrrTarget::Input).unwrap();
        let p = crate::models::Classifier::predict_proba(&model, &batch.x).unwrap();
        let ce: f64 = batch.labels.iter().enumerate().map(|(i, &y)| -w[y] * p.data()[i * 2 + y].ln()).sum();
        assert!((r.loss - ce).abs() < 1e-12);
        assert_eq!(r.loss, r.answers);
    }

    #[test]
    fn zero_mask_means_zero_reasons() {
        let model = Model::init(ModelSpec::mlp(vec![3, 4, 2]), 1).unwrap();
        let mut batch = random_batch(5, &[3], 2);
        batch.masks = Some(Tensor::zeros(vec![5, 3]));
        let r = rrr_loss(&model, &batch, 10.0, 0.0, &[1.0, 1.0], RrrTarget::Input).unwrap();
        assert_eq!(r.reasons, 0.0);
    }

    #[test]
    fn mlp_loss_gradient_matches_finite_differences() {
        let model = Model::init(ModelSpec::mlp(vec![4, 6, 2]), 11).unwrap();
        let batch = random_batch(6, &[4], 12);
        let w = [1.2, 0.8];
        let r = rrr_loss(&model, &batch, 3.0, 0.01, &w, RrrTarget::Input).unwrap();
        for i in 0..model.params.len() {
            let fd = central_difference(&model.params[i], 1e-5, |p| {
                let mut m = model.clone();
                m.params[i] = p.clone();
                rrr_loss(&m, &batch, 3.0, 0.01, &w, RrrTarget::Input).unwrap().loss
            });
            let err = relative_error(&r.grads[i], &fd);
            assert!(err <= 1e-3, "param {i}: {err}");
        }
    }

    #[test]
    fn last_conv_target_gradient_matches_finite_differences() {
        let spec = ModelSpec {
            architecture: Architecture::Cnn { conv_channels: vec![2, 3], kernel: 3, pool: 2, dense: vec![] },
            input_shape: vec![1, 6, 6],
            classes: 2,
        };
        let model = Model::init(spec, 4).unwrap();
        let mut batch = random_batch(3, &[1, 6, 6], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        batch.masks = Some(Tensor::new(vec![3, 3, 3], (0..27).map(|_| rng.gen_bool(0.5) as u8 as f64).collect()).unwrap());
        let r = rrr_loss(&model, &batch, 2.0, 0.0, &[1.0, 1.0], RrrTarget::LastConv).unwrap();
        assert!(r.reasons > 0.0);
        for i in 0..model.params.len() {
            let fd = central_difference(&model.params[i], 1e-5, |p| {
                let mut m = model.clone();
                m.params[i] = p.clone();
                rrr_loss(&m, &batch, 2.0, 0.0, &[1.0, 1.0], RrrTarget::LastConv).unwrap().loss
            });
            let err = relative_error(&r.grads[i], &fd);
            assert!(err <= 1e-3, "param {i}: {err}");
        }
    }

    #[test]
    fn misaligned_masks_rejected() {
        let model = Model::init(ModelSpec::mlp(vec![3, 4, 2]), 1).unwrap();
        let mut batch = random_batch(2, &[3], 2);
        batch.masks = Some(Tensor::zeros(vec![2, 5]));
        assert!(rrr_loss(&model, &batch, 1.0, 0.0, &[1.0, 1.0], RrrTarget::Input).is_err());
    }
}
