//! Central finite differences, used to check analytic gradients.

use crate::tensor::Tensor;

/// Central-difference estimate of the gradient of `f` at `at`.
pub fn central_difference(at: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Vec::with_capacity(at.len());
    let mut probe = at.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&Tensor::from_parts(at.shape().to_vec(), probe.clone()));
        probe[i] = orig - step;
        let minus = f(&Tensor::from_parts(at.shape().to_vec(), probe.clone()));
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Tensor::from_parts(at.shape().to_vec(), grad)
}

/// Largest elementwise deviation of `analytic` from `reference`, relative
/// to the largest magnitude in `reference` (floored at `1e-8`).
pub fn relative_error(analytic: &Tensor, reference: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), reference.shape());
    let scale = reference.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic.max_abs_diff(reference) / scale
}
