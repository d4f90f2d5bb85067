use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Correction, FeedbackError};
use crate::explain::ComponentScheme;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CeVariant {
    /// iid uniform over each feature's observed training range
    Randomize,
    /// each feature's training mean
    AlternativeValue,
    /// the component as it appears in a random training example of the
    /// corrected class
    SubstituteSameClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CeStrategy {
    pub variant: CeVariant,
    /// Counterexamples per marked component.
    pub count: usize,
}

/// Per-feature range and mean of a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub mean: Vec<f64>,
}

impl FeatureStats {
    pub fn fit(x: &Tensor) -> Self {
        let d = x.row_width();
        let n = x.shape()[0].max(1) as f64;
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        let mut mean = vec![0.0; d];
        for row in x.data().chunks(d) {
            for (i, &v) in row.iter().enumerate() {
                min[i] = min[i].min(v);
                max[i] = max[i].max(v);
                mean[i] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        if x.shape()[0] == 0 {
            min.fill(0.0);
            max.fill(0.0);
        }
        Self { min, max, mean }
    }
}

/// `strategy.count` copies of `x` per marked component, each with that
/// component replaced according to the variant, all labelled with the
/// corrected label. Indices outside the marked components are copied bit
/// for bit.
#[allow(clippy::too_many_arguments)]
pub fn to_counterexamples(
    x: &Tensor,
    correction: &Correction,
    strategy: CeStrategy,
    scheme: &ComponentScheme,
    train_x: &Tensor,
    train_labels: &[usize],
    stats: &FeatureStats,
    seed: u64,
) -> Result<Vec<(Tensor, usize)>, FeedbackError> {
    if strategy.count == 0 {
        return Err(FeedbackError::ZeroCount);
    }
    correction.validate(scheme)?;
    let label = correction.label;
    let donors: Vec<usize> = match strategy.variant {
        CeVariant::SubstituteSameClass if !correction.components.is_empty() => {
            let d: Vec<usize> = train_labels
                .iter()
                .enumerate()
                .filter(|(_, &y)| y == label)
                .map(|(i, _)| i)
                .collect();
            if d.is_empty() {
                return Err(FeedbackError::NoDonor(label));
            }
            d
        }
        _ => Vec::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(strategy.count * correction.components.len());
    for &j in &correction.components {
        let idx = scheme.indices(j);
        for _ in 0..strategy.count {
            let mut data = x.data().to_vec();
            match strategy.variant {
                CeVariant::Randomize => {
                    for &i in idx {
                        let (lo, hi) = (stats.min[i], stats.max[i]);
                        data[i] = if hi > lo { rng.gen_range(lo..hi) } else { lo };
                    }
                }
                CeVariant::AlternativeValue => {
                    for &i in idx {
                        data[i] = stats.mean[i];
                    }
                }
                CeVariant::SubstituteSameClass => {
                    let donor = train_x.row(donors[rng.gen_range(0..donors.len())]);
                    for &i in idx {
                        data[i] = donor[i];
                    }
                }
            }
            out.push((Tensor::from_parts(x.shape().to_vec(), data), label));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, prop_oneof, proptest, Just};

    fn setup() -> (ComponentScheme, Tensor, Vec<usize>, FeatureStats) {
        let scheme = ComponentScheme::image_grid(&[8, 8], 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let train = Tensor::new(vec![10, 8, 8], (0..640).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let labels = (0..10).map(|i| i % 2).collect();
        let stats = FeatureStats::fit(&train);
        (scheme, train, labels, stats)
    }

    #[test]
    fn empty_correction_yields_nothing() {
        let (scheme, train, labels, stats) = setup();
        let x = Tensor::zeros(vec![8, 8]);
        let strategy = CeStrategy { variant: CeVariant::Randomize, count: 3 };
        let out = to_counterexamples(&x, &Correction::new(0, 1, vec![]), strategy, &scheme, &train, &labels, &stats, 0).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn randomize_touches_only_the_patch() {
        let (scheme, train, labels, stats) = setup();
        let x = Tensor::full(vec![8, 8], 2.0); // outside the training range
        let strategy = CeStrategy { variant: CeVariant::Randomize, count: 1 };
        let out = to_counterexamples(&x, &Correction::new(0, 1, vec![0]), strategy, &scheme, &train, &labels, &stats, 1).unwrap();
        let (xbar, y) = &out[0];
        assert_eq!(*y, 1);
        for r in 0..8 {
            for q in 0..8 {
                let v = xbar.data()[r * 8 + q];
                if r < 4 && q < 4 {
                    assert_ne!(v, 2.0);
                } else {
                    assert_eq!(v.to_bits(), 2f64.to_bits());
                }
            }
        }
    }

    #[test]
    fn substitute_needs_a_donor() {
        let (scheme, train, _, stats) = setup();
        let labels = vec![0; 10];
        let strategy = CeStrategy { variant: CeVariant::SubstituteSameClass, count: 2 };
        let err = to_counterexamples(&Tensor::zeros(vec![8, 8]), &Correction::new(0, 1, vec![1]), strategy, &scheme, &train, &labels, &stats, 0)
            .unwrap_err();
        assert!(matches!(err, FeedbackError::NoDonor(1)));
    }

    #[test]
    fn alternative_value_is_training_mean() {
        let (scheme, train, labels, stats) = setup();
        let strategy = CeStrategy { variant: CeVariant::AlternativeValue, count: 1 };
        let out = to_counterexamples(&Tensor::zeros(vec![8, 8]), &Correction::new(0, 0, vec![3]), strategy, &scheme, &train, &labels, &stats, 0).unwrap();
        for &i in scheme.indices(3) {
            assert_eq!(out[0].0.data()[i], stats.mean[i]);
        }
    }

    proptest! {
        #[test]
        fn count_and_locality(
            comps in proptest::collection::btree_set(0usize..4, 0..4),
            c in 1usize..4,
            variant in prop_oneof![Just(CeVariant::Randomize), Just(CeVariant::AlternativeValue), Just(CeVariant::SubstituteSameClass)],
            seed in any::<u64>(),
        ) {
            let (scheme, train, labels, stats) = setup();
            let x = Tensor::full(vec![8, 8], 5.0);
            let correction = Correction::new(3, 1, comps.iter().copied().collect());
            let out = to_counterexamples(&x, &correction, CeStrategy { variant, count: c }, &scheme, &train, &labels, &stats, seed).unwrap();
            prop_assert_eq!(out.len(), c * comps.len());
            let touched: Vec<usize> = comps.iter().flat_map(|&j| scheme.indices(j).to_vec()).collect();
            for (xbar, y) in &out {
                prop_assert_eq!(*y, 1);
                for i in 0..64 {
                    if !touched.contains(&i) {
                        prop_assert_eq!(xbar.data()[i].to_bits(), 5f64.to_bits());
                    }
                }
            }
        }
    }
}
