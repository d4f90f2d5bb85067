use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{top_k_by_magnitude, ComponentScheme, ExplainError, Explanation, ExplanationKind};
use crate::linalg::cholesky_solve;
use crate::models::Classifier;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimeParams {
    pub n_samples: usize,
    /// `None` means `0.25 * sqrt(d)` for `d` components.
    pub kernel_width: Option<f64>,
    pub ridge_alpha: f64,
    pub k: usize,
    pub seed: u64,
    /// Value for switched-off components. `None` uses the model's training
    /// mean, or zero when it has none.
    #[serde(default)]
    pub baseline: Option<Vec<f64>>,
}

impl Default for LimeParams {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            kernel_width: None,
            ridge_alpha: 1.0,
            k: 3,
            seed: 0,
            baseline: None,
        }
    }
}

impl LimeParams {
    pub fn kernel_width_for(&self, d: usize) -> f64 {
        self.kernel_width.unwrap_or(0.25 * (d as f64).sqrt())
    }
}

/// Copies of `x` with each mask's off components replaced by `baseline`.
pub(crate) fn perturbed_batch(x: &Tensor, baseline: &[f64], scheme: &ComponentScheme, masks: &[Vec<bool>]) -> Tensor {
    let mut shape = vec![masks.len()];
    shape.extend_from_slice(x.shape());
    let mut data = Vec::with_capacity(masks.len() * x.len());
    for z in masks {
        let start = data.len();
        data.extend_from_slice(x.data());
        for (j, &on) in z.iter().enumerate() {
            if !on {
                for &i in scheme.indices(j) {
                    data[start + i] = baseline[i];
                }
            }
        }
    }
    Tensor::from_parts(shape, data)
}

/// Fits a weighted ridge-regression surrogate from binary component masks
/// to the model's probability for its predicted class at `x`.
pub fn lime_explain<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    scheme: &ComponentScheme,
    params: &LimeParams,
) -> Result<Explanation, ExplainError> {
    if !scheme.covers(x.shape()) || scheme.input_len() != x.len() {
        return Err(ExplainError::SchemeMismatch {
            scheme: scheme.input_shape.clone(),
            instance: x.shape().to_vec(),
        });
    }
    let d = scheme.len();
    if params.n_samples < d {
        return Err(ExplainError::TooFewSamples { needed: d, got: params.n_samples });
    }
    let baseline = match (&params.baseline, model.reference_input()) {
        (Some(b), _) => b.clone(),
        (None, Some(m)) => m.to_vec(),
        (None, None) => vec![0.0; x.len()],
    };
    if baseline.len() != x.len() {
        return Err(ExplainError::SchemeMismatch {
            scheme: vec![baseline.len()],
            instance: x.shape().to_vec(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut masks = Vec::with_capacity(params.n_samples);
    masks.push(vec![true; d]);
    while masks.len() < params.n_samples {
        masks.push((0..d).map(|_| rng.gen_bool(0.5)).collect());
    }
    if masks.iter().all(|z| *z == masks[0]) {
        return Err(ExplainError::DegenerateSamples);
    }

    let mut batched = vec![1];
    batched.extend_from_slice(x.shape());
    let single = Tensor::from_parts(batched, x.data().to_vec());
    let class = model.predict_proba(&single)?.argmax_rows()[0];

    let mut y = Vec::with_capacity(masks.len());
    for chunk in masks.chunks(256) {
        let p = model.predict_perturbed(x, &baseline, scheme, chunk)?;
        let k = model.classes();
        y.extend(p.data().chunks(k).map(|row| row[class]));
    }

    let width = params.kernel_width_for(d);
    let pi: Vec<f64> = masks
        .iter()
        .map(|z| {
            let off = z.iter().filter(|&&on| !on).count() as f64 / d as f64;
            (-(off * off) / (width * width)).exp()
        })
        .collect();
    let fit = weighted_ridge(&masks, &y, &pi, params.ridge_alpha)?;
    let top_k = top_k_by_magnitude(&fit.weights, params.k);
    Ok(Explanation {
        kind: ExplanationKind::Surrogate,
        class,
        weights: fit.weights,
        heatmap: None,
        top_k,
        intercept: Some(fit.intercept),
        score: Some(fit.r2),
    })
}

struct RidgeFit {
    weights: Vec<f64>,
    intercept: f64,
    r2: f64,
}

/// Ridge with an unpenalized intercept, solved on weighted-centered data.
fn weighted_ridge(masks: &[Vec<bool>], y: &[f64], pi: &[f64], alpha: f64) -> Result<RidgeFit, ExplainError> {
    let d = masks[0].len();
    let total: f64 = pi.iter().sum();
    let mut xbar = vec![0.0; d];
    let mut ybar = 0.0;
    for ((z, &yi), &w) in masks.iter().zip(y).zip(pi) {
        for (m, &on) in xbar.iter_mut().zip(z) {
            if on {
                *m += w;
            }
        }
        ybar += w * yi;
    }
    xbar.iter_mut().for_each(|m| *m /= total);
    ybar /= total;

    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    let mut xc = vec![0.0; d];
    for ((z, &yi), &w) in masks.iter().zip(y).zip(pi) {
        for j in 0..d {
            xc[j] = z[j] as u8 as f64 - xbar[j];
        }
        let yc = yi - ybar;
        for a in 0..d {
            let wa = w * xc[a];
            rhs[a] += wa * yc;
            for b in a..d {
                gram[a * d + b] += wa * xc[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            gram[a * d + b] = gram[b * d + a];
        }
        gram[a * d + a] += alpha;
    }
    let weights = cholesky_solve(&gram, &rhs, d)?;
    let intercept = ybar - xbar.iter().zip(&weights).map(|(m, w)| m * w).sum::<f64>();

    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for ((z, &yi), &w) in masks.iter().zip(y).zip(pi) {
        let pred = intercept + z.iter().zip(&weights).filter(|(on, _)| **on).map(|(_, w)| w).sum::<f64>();
        ss_res += w * (yi - pred).powi(2);
        ss_tot += w * (yi - ybar).powi(2);
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else if ss_res == 0.0 { 1.0 } else { 0.0 };
    Ok(RidgeFit { weights, intercept, r2 })
}

/// Repeats [`lime_explain`] with seeds `seed..seed + runs` and keeps the
/// `k` components selected most often. Ties go to the larger mean `|w|`,
/// then the lower index. The returned weights are the per-component means.
pub fn stable_lime<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    scheme: &ComponentScheme,
    params: &LimeParams,
    runs: usize,
) -> Result<Explanation, ExplainError> {
    if runs == 0 {
        return Err(ExplainError::ZeroRuns);
    }
    if runs == 1 {
        return lime_explain(model, x, scheme, params);
    }
    let d = scheme.len();
    let mut freq = vec![0usize; d];
    let mut mean_abs = vec![0.0; d];
    let mut mean_w = vec![0.0; d];
    let mut first: Option<Explanation> = None;
    for r in 0..runs {
        let p = LimeParams {
            seed: params.seed.wrapping_add(r as u64),
            ..params.clone()
        };
        let e = lime_explain(model, x, scheme, &p)?;
        for &j in &e.top_k {
            freq[j] += 1;
        }
        for (j, w) in e.weights.iter().enumerate() {
            mean_abs[j] += w.abs() / runs as f64;
            mean_w[j] += w / runs as f64;
        }
        first.get_or_insert(e);
    }
    let idx = rank_stable(&freq, &mean_abs, params.k);
    let first = first.expect("runs >= 1");
    Ok(Explanation {
        top_k: idx,
        weights: mean_w,
        ..first
    })
}

fn rank_stable(freq: &[usize], mean_abs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..freq.len()).filter(|&j| freq[j] > 0).collect();
    idx.sort_by(|&a, &b| {
        freq[b]
            .cmp(&freq[a])
            .then(mean_abs[b].total_cmp(&mean_abs[a]))
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}
