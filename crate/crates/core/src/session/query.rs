use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LoopError;
use crate::models::Classifier;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryStrategy {
    /// Smallest gap between the two most probable classes.
    #[default]
    Margin,
    /// Smallest top probability.
    LeastConfidence,
    Random,
}

fn margin(p: &[f64]) -> f64 {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    a - b
}

/// Position (in `ids`) of the instance to query, given one probability row
/// per candidate. Score ties go to the lowest id.
pub fn select_position(probs: &Tensor, ids: &[u64], strategy: QueryStrategy, seed: u64) -> Result<usize, LoopError> {
    if ids.is_empty() {
        return Err(LoopError::EmptyPool);
    }
    let score = |i: usize| -> f64 {
        let p = probs.row(i);
        match strategy {
            QueryStrategy::Margin => margin(p),
            QueryStrategy::LeastConfidence => p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            QueryStrategy::Random => 0.0,
        }
    };
    if strategy == QueryStrategy::Random {
        return Ok(ChaCha8Rng::seed_from_u64(seed).gen_range(0..ids.len()));
    }
    let best = (0..ids.len())
        .min_by(|&a, &b| score(a).total_cmp(&score(b)).then(ids[a].cmp(&ids[b])))
        .expect("nonempty");
    Ok(best)
}

/// Id of the most informative instance of the pool `x` (one row per id).
pub fn select_query<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    ids: &[u64],
    strategy: QueryStrategy,
    seed: u64,
) -> Result<u64, LoopError> {
    if ids.is_empty() {
        return Err(LoopError::EmptyPool);
    }
    let probs = model.predict_proba(x)?;
    Ok(ids[select_position(&probs, ids, strategy, seed)?])
}
