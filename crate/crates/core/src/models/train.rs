use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelError, Result};
use crate::autodiff::{AutodiffError, Tape};
use crate::feedback::{self, calibrate_lambda1};
use crate::tensor::Tensor;

/// Training data: instances, labels and (for the gradient penalty) one
/// binary mask per instance aligned to the penalty target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub masks: Option<Tensor>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            masks: self.masks.as_ref().map(|m| m.select_rows(rows)),
        }
    }

    pub fn has_nonzero_mask(&self) -> bool {
        self.masks.as_ref().is_some_and(|m| m.data().iter().any(|&v| v != 0.0))
    }
}

/// What the input-gradient penalty differentiates with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RrrTarget {
    Input,
    LastConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum Lambda1 {
    Fixed(f64),
    /// Calibrated once from a one-epoch warmup; `default` is used while no
    /// mask is set.
    Auto { default: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossSpec {
    CrossEntropy {
        class_weights: Option<Vec<f64>>,
    },
    Rrr {
        lambda1: Lambda1,
        target: RrrTarget,
        class_weights: Option<Vec<f64>>,
    },
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        LossSpec::CrossEntropy { class_weights: None }
    }

    fn class_weights(&self, classes: usize) -> Vec<f64> {
        let w = match self {
            LossSpec::CrossEntropy { class_weights } | LossSpec::Rrr { class_weights, .. } => class_weights,
        };
        w.clone().unwrap_or_else(|| vec![1.0; classes])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Optimizer settings. The per-batch objective is the per-instance mean of
/// the answers and reasons terms plus `l2 * sum(theta^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimSpec {
    pub kind: OptimKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2: f64,
}

impl OptimSpec {
    pub fn adam(learning_rate: f64, batch_size: usize, epochs: usize) -> Self {
        Self {
            kind: OptimKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate,
            batch_size,
            epochs,
            l2: 0.0,
        }
    }

    pub fn sgd(learning_rate: f64, momentum: f64, batch_size: usize, epochs: usize) -> Self {
        Self {
            kind: OptimKind::SgdMomentum { momentum },
            learning_rate,
            batch_size,
            epochs,
            l2: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(ModelError::InvalidOptim(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidOptim("batch size 0".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(ModelError::InvalidOptim(format!("l2 weight {}", self.l2)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Mean per-batch objective.
    pub loss: f64,
    pub accuracy: f64,
    /// Weighted cross-entropy summed over the epoch's instances.
    pub answers: f64,
    /// Unweighted reasons term summed over the epoch's instances.
    pub reasons: f64,
    pub lambda1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Set when this call calibrated an automatic `lambda1`.
    pub lambda1_calibrated: Option<f64>,
}

enum OptState {
    Sgd { velocity: Vec<Vec<f64>> },
    Adam { m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: i32 },
}

impl OptState {
    fn new(kind: &OptimKind, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>();
        match kind {
            OptimKind::SgdMomentum { .. } => OptState::Sgd { velocity: zeros() },
            OptimKind::Adam { .. } => OptState::Adam {
                m: zeros(),
                v: zeros(),
                t: 0,
            },
        }
    }

    fn step(&mut self, spec: &OptimSpec, params: &mut [Tensor], grads: &[Tensor]) {
        let lr = spec.learning_rate;
        match (self, spec.kind) {
            (OptState::Sgd { velocity }, OptimKind::SgdMomentum { momentum }) => {
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    let mut data = std::mem::replace(p, Tensor::zeros(vec![0])).into_data();
                    for ((x, &gi), v) in data.iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                        *v = momentum * *v + gi;
                        *x -= lr * *v;
                    }
                    *p = Tensor::from_parts(g.shape().to_vec(), data);
                }
            }
            (OptState::Adam { m, v, t }, OptimKind::Adam { beta1, beta2, eps }) => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (((p, g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let mut data = std::mem::replace(p, Tensor::zeros(vec![0])).into_data();
                    for (((x, &gi), mm), vv) in data.iter_mut().zip(g.data()).zip(mi.iter_mut()).zip(vi.iter_mut()) {
                        *mm = beta1 * *mm + (1.0 - beta1) * gi;
                        *vv = beta2 * *vv + (1.0 - beta2) * gi * gi;
                        *x -= lr * (*mm / c1) / ((*vv / c2).sqrt() + eps);
                    }
                    *p = Tensor::from_parts(g.shape().to_vec(), data);
                }
            }
            _ => unreachable!("optimizer state matches its spec"),
        }
    }
}

fn shuffle_seed(seed: u64, epoch: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch.wrapping_add(0xD1B5_4A32_D192_ED03)
}

fn is_divergence(e: &ModelError) -> bool {
    matches!(e, ModelError::Autodiff(AutodiffError::NonFinite(_)))
}

/// Fits `model` on `data` in place, continuing from its current parameters.
///
/// Mini-batch order is a deterministic function of the model seed and its
/// running epoch counter.
pub fn train(model: &mut Model, data: &LabeledSet, loss: &LossSpec, optim: &OptimSpec) -> Result<TrainReport> {
    optim.validate()?;
    let mut report = TrainReport::default();
    if optim.epochs == 0 {
        return Ok(report);
    }
    if data.is_empty() {
        return Err(ModelError::ShapeMismatch("empty training set".into()));
    }
    let weights = loss.class_weights(model.spec.classes);
    let (target, mut lambda1, calibrate) = match loss {
        LossSpec::CrossEntropy { .. } => (None, 0.0, false),
        LossSpec::Rrr { lambda1, target, .. } => match *lambda1 {
            Lambda1::Fixed(l) => (Some(*target), l, false),
            Lambda1::Auto { default } => (Some(*target), default, data.has_nonzero_mask()),
        },
    };
    if target.is_some() && data.masks.is_none() {
        return Err(ModelError::ShapeMismatch("gradient penalty requires masks".into()));
    }

    let mut state = OptState::new(&optim.kind, &model.params);
    let n = data.len();
    for epoch in 0..optim.epochs {
        let warmup = calibrate && epoch == 0;
        let epoch_lambda = if warmup { 0.0 } else { lambda1 };
        let snapshot = model.params.clone();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(model.seed, model.epochs)));

        let mut totals = (0.0, 0.0, 0.0, 0usize);
        let outcome: Result<()> = (|| {
            for rows in order.chunks(optim.batch_size) {
                let batch = data.subset(rows);
                let tape = Tape::new();
                let terms = feedback::rrr::loss_terms(
                    model,
                    &tape,
                    &batch,
                    &weights,
                    if epoch_lambda > 0.0 { target } else { None },
                )?;
                let b = rows.len() as f64;
                let mut objective = terms.answers.clone();
                if let Some(r) = &terms.reasons {
                    objective = objective.add(&r.scale(epoch_lambda)?)?;
                }
                objective = objective.scale(1.0 / b)?;
                if optim.l2 > 0.0 {
                    objective = objective.add(&terms.l2.scale(optim.l2)?)?;
                }
                let refs: Vec<_> = terms.params.iter().collect();
                let grads: Vec<Tensor> = tape
                    .gradient(&objective, &refs, false)?
                    .into_iter()
                    .map(|g| (*g.var.value()).clone())
                    .collect();
                state.step(optim, &mut model.params, &grads);
                model.step += 1;
                totals.0 += objective.item();
                totals.1 += terms.answers.item();
                totals.2 += terms.reasons.as_ref().map_or(0.0, |r| r.item());
                totals.3 += 1;
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            if is_divergence(&e) {
                model.params = snapshot;
                return Err(ModelError::Divergence {
                    epoch,
                    report: Box::new(report),
                });
            }
            return Err(e);
        }
        if model.params.iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
            model.params = snapshot;
            return Err(ModelError::Divergence {
                epoch,
                report: Box::new(report),
            });
        }
        model.epochs += 1;
        let accuracy = match model.accuracy(&data.x, &data.labels) {
            Err(e) if is_divergence(&e) => {
                model.params = snapshot;
                model.epochs -= 1;
                return Err(ModelError::Divergence {
                    epoch,
                    report: Box::new(report),
                });
            }
            other => other?,
        };

        if warmup {
            let t = target.expect("calibration implies a penalty target");
            let (answers, reasons) = feedback::rrr::evaluate_terms(model, data, &weights, t)?;
            if let Ok(l) = calibrate_lambda1(answers, reasons) {
                lambda1 = l;
                report.lambda1_calibrated = Some(l);
            }
        }
        report.epochs.push(EpochStats {
            loss: totals.0 / totals.3 as f64,
            accuracy,
            answers: totals.1,
            reasons: totals.2,
            lambda1: epoch_lambda,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Classifier, ModelSpec};
    use rand::Rng;

    fn blobs(n: usize, seed: u64) -> LabeledSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -2.0 } else { 2.0 };
            x.push(c + rng.gen_range(-1.0..1.0));
            x.push(c + rng.gen_range(-1.0..1.0));
            labels.push(y);
        }
        LabeledSet {
            x: Tensor::matrix(n, 2, x).unwrap(),
            labels,
            masks: None,
        }
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let data = blobs(100, 1);
        let mut m = Model::init(ModelSpec::logreg(2, 2), 0).unwrap();
        let report = train(&mut m, &data, &LossSpec::cross_entropy(), &OptimSpec::sgd(0.1, 0.9, 10, 50)).unwrap();
        assert_eq!(report.epochs.len(), 50);
        assert!(report.epochs.last().unwrap().accuracy >= 0.99);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let data = blobs(10, 1);
        let mut m = Model::init(ModelSpec::logreg(2, 2), 0).unwrap();
        let before = m.clone();
        let report = train(&mut m, &data, &LossSpec::cross_entropy(), &OptimSpec::adam(1e-3, 4, 0)).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn refit_is_reproducible() {
        let data = blobs(40, 2);
        let run = || {
            let mut m = Model::init(ModelSpec::mlp(vec![2, 8, 2]), 3).unwrap();
            train(&mut m, &data, &LossSpec::cross_entropy(), &OptimSpec::adam(1e-2, 8, 5)).unwrap();
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pure_decay_step_shrinks_norm() {
        // With every label predicted at uniform probability by a zero-input
        // model the cross-entropy gradient w.r.t. weights is zero.
        let data = LabeledSet {
            x: Tensor::zeros(vec![4, 3]),
            labels: vec![0, 1, 0, 1],
            masks: None,
        };
        let mut m = Model::init(ModelSpec::logreg(3, 2), 9).unwrap();
        let before = m.param_norm_sq();
        let mut optim = OptimSpec::sgd(0.1, 0.0, 4, 1);
        optim.l2 = 0.5;
        train(&mut m, &data, &LossSpec::cross_entropy(), &optim).unwrap();
        assert!(m.param_norm_sq() < before);
    }

    #[test]
    fn invalid_optim_rejected() {
        let data = blobs(4, 0);
        let mut m = Model::init(ModelSpec::logreg(2, 2), 0).unwrap();
        assert!(train(&mut m, &data, &LossSpec::cross_entropy(), &OptimSpec::sgd(0.0, 0.0, 1, 1)).is_err());
        assert!(train(&mut m, &data, &LossSpec::cross_entropy(), &OptimSpec::sgd(0.1, 0.0, 0, 1)).is_err());
    }

    #[test]
    fn divergence_restores_last_finite_parameters() {
        let mut data = blobs(8, 0);
        data.x = data.x.map(|v| v * 1e150).unwrap();
        let mut m = Model::init(ModelSpec::mlp(vec![2, 4, 2]), 0).unwrap();
        let err = train(&mut m, &data, &LossSpec::cross_entropy(), &OptimSpec::sgd(1e10, 0.0, 8, 3)).unwrap_err();
        assert!(matches!(err, ModelError::Divergence { .. }), "{err:?}");
        assert!(m.params.iter().all(|p| p.data().iter().all(|v| v.is_finite())));
        assert_eq!(m.predict_proba(&Tensor::zeros(vec![1, 2])).unwrap().shape(), &[1, 2]);
    }
}
