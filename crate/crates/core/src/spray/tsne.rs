use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SprayError;
use crate::data::normal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iters: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iters: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    /// `n` centred 2D points.
    pub coords: Vec<[f64; 2]>,
    /// KL(P || Q) at the start of every iteration.
    pub kl_history: Vec<f64>,
    pub perplexity: f64,
    /// The requested perplexity exceeded `(n - 1) / 3` and was lowered.
    pub perplexity_clamped: bool,
}

/// Conditional affinities of row `i` for squared distances `d2`, with the
/// Gaussian precision found by bisection so the row entropy matches
/// `ln(perplexity)`.
fn row_affinities(d2: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
    let mut p = vec![0.0; d2.len()];
    for _ in 0..200 {
        let min = d2
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .fold(f64::INFINITY, |m, (_, &v)| m.min(v));
        let mut sum = 0.0;
        for (j, &d) in d2.iter().enumerate() {
            p[j] = if j == i { 0.0 } else { (-(d - min) * beta).exp() };
            sum += p[j];
        }
        let mut h = 0.0;
        for (j, v) in p.iter_mut().enumerate() {
            *v /= sum;
            if j != i && *v > 0.0 {
                h -= *v * v.ln();
            }
        }
        let diff = h - target;
        if diff.abs() < 1e-10 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    p
}

/// Exact t-SNE of an `n x n` input distance matrix.
pub fn tsne(distances: &[f64], n: usize, params: &TsneParams, seed: u64) -> Result<TsneResult, SprayError> {
    if n < 4 {
        return Err(SprayError::TooFewPoints { n, k_nn: 3 });
    }
    let max_perp = (n - 1) as f64 / 3.0;
    let clamped = params.perplexity > max_perp;
    let perplexity = if clamped {
        log::warn!("perplexity {} too high for {n} points, using {max_perp}", params.perplexity);
        max_perp
    } else {
        params.perplexity
    };

    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let d2: Vec<f64> = distances[i * n..(i + 1) * n].iter().map(|d| d * d).collect();
        p[i * n..(i + 1) * n].copy_from_slice(&row_affinities(&d2, i, perplexity));
    }
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sym[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [1e-4 * normal(&mut rng), 1e-4 * normal(&mut rng)]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut kl_history = Vec::with_capacity(params.iters);
    let mut num = vec![0.0; n * n];
    let mut prev = y.clone();
    let mut best = f64::INFINITY;
    for iter in 0..params.iters {
        let exaggerated = iter < params.exaggeration_iters;
        let exaggerate = if exaggerated { params.early_exaggeration } else { 1.0 };
        let momentum = if exaggerated { 0.5 } else { 0.8 };
        let (mut z, mut kl) = student_t(&y, &sym, &mut num);
        // Past the exaggeration phase an uphill step is undone and the
        // velocity dropped, so the recorded objective never rises.
        if !exaggerated && kl > best {
            y.copy_from_slice(&prev);
            update.iter_mut().for_each(|u| *u = [0.0; 2]);
            gains.iter_mut().for_each(|g| *g = g.map(|v: f64| (v * 0.5).max(0.01)));
            (z, kl) = student_t(&y, &sym, &mut num);
        }
        if !exaggerated {
            best = kl;
        }
        kl_history.push(kl);
        prev.copy_from_slice(&y);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i != j {
                    let m = (exaggerate * sym[i * n + j] - num[i * n + j] / z) * num[i * n + j];
                    g[0] += 4.0 * m * (y[i][0] - y[j][0]);
                    g[1] += 4.0 * m * (y[i][1] - y[j][1]);
                }
            }
            for d in 0..2 {
                gains[i][d] = if (g[d] > 0.0) != (update[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8f64).max(0.01)
                };
                update[i][d] = momentum * update[i][d] - params.learning_rate * gains[i][d] * g[d];
            }
        }
        for (yi, u) in y.iter_mut().zip(&update) {
            yi[0] += u[0];
            yi[1] += u[1];
        }
        center(&mut y);
    }
    center(&mut y);
    Ok(TsneResult {
        coords: y,
        kl_history,
        perplexity,
        perplexity_clamped: clamped,
    })
}

/// Fills `num` with the Student-t kernel of `y` and returns its sum and
/// KL(P || Q).
fn student_t(y: &[[f64; 2]], p: &[f64], num: &mut [f64]) -> (f64, f64) {
    let n = y.len();
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = if i == j {
                0.0
            } else {
                let (dx, dy) = (y[i][0] - y[j][0], y[i][1] - y[j][1]);
                1.0 / (1.0 + dx * dx + dy * dy)
            };
            num[i * n + j] = v;
            z += v;
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let q = (num[i * n + j] / z).max(1e-12);
                kl += p[i * n + j] * (p[i * n + j] / q).ln();
            }
        }
    }
    (z, kl)
}

fn center(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    let m = y.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
    for p in y.iter_mut() {
        p[0] -= m[0];
        p[1] -= m[1];
    }
}
