//! Probability-simplex primitives shared by every other module.
//!
//! "Knowledge" is a per-sample logit vector; a [`ProbVector`] is its
//! softmax-normalized form. Shannon entropy is reported in bits (base-2),
//! while the KL and cross-entropy training losses use natural log: the base
//! only rescales gradients, and nats are the usual convention for losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to log arguments so degenerate targets never produce -Inf.
pub const LOG_EPS: f64 = 1e-12;

/// Tolerance on the simplex sum-to-one invariant.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A raw logit vector of length `C` as produced by a predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knowledge {
    values: Vec<f64>,
}

impl Knowledge {
    /// Wraps a logit vector, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidKnowledge("empty logit vector".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidKnowledge(format!("non-finite logit {bad}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn class_count(&self) -> usize {
        self.values.len()
    }

    /// True when every entry equals every other (bitwise), i.e. softmax is
    /// uniform at any temperature.
    pub fn is_constant(&self) -> bool {
        self.values.windows(2).all(|w| w[0] == w[1])
    }
}

/// Normalized knowledge: entries in [0, 1] summing to 1 within [`SIMPLEX_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    /// Validates the simplex invariants.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidKnowledge("empty probability vector".into()));
        }
        for &p in &probs {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidKnowledge(format!(
                    "probability {p} outside [0, 1]"
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidKnowledge(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Construction path for values that are in the simplex by algebra
    /// (softmax outputs, rectified refinements). Checked in debug builds.
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!(
            {
                let sum: f64 = probs.iter().sum();
                (sum - 1.0).abs() <= SIMPLEX_TOL && probs.iter().all(|p| (0.0..=1.0).contains(p))
            },
            "internal simplex violation: {probs:?}"
        );
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn class_count(&self) -> usize {
        self.probs.len()
    }

    /// Uniform distribution over `classes` entries.
    pub fn uniform(classes: usize) -> Self {
        Self::from_normalized(vec![1.0 / classes as f64; classes])
    }
}

/// Scalar statistic used to measure a knowledge distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistMeasure {
    /// max(probs); the model's confidence on its preferred class.
    PeakProbability,
    /// Shannon entropy in bits.
    ShannonEntropy,
}

impl DistMeasure {
    pub fn evaluate(&self, p: &ProbVector) -> f64 {
        match self {
            DistMeasure::PeakProbability => peak_probability(p).0,
            DistMeasure::ShannonEntropy => shannon_entropy(p),
        }
    }
}

/// Softmax normalization. Shift-invariant: the max is subtracted before
/// exponentiation so large logits cannot overflow.
pub fn softmax(z: &Knowledge) -> ProbVector {
    softmax_slice(z.values())
}

/// Softmax with a temperature divisor, i.e. softmax(z / theta).
pub fn softmax_with_temperature(z: &Knowledge, theta: f64) -> ProbVector {
    debug_assert!(theta > 0.0);
    let max = z.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.values().iter().map(|&v| ((v - max) / theta).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbVector::from_normalized(exps.into_iter().map(|e| e / sum).collect())
}

pub(crate) fn softmax_slice(values: &[f64]) -> ProbVector {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbVector::from_normalized(exps.into_iter().map(|e| e / sum).collect())
}

/// Shannon entropy in bits, with 0*log2(0) taken as 0.
pub fn shannon_entropy(p: &ProbVector) -> f64 {
    p.probs()
        .iter()
        .map(|&x| if x > 0.0 { -x * x.log2() } else { 0.0 })
        .sum()
}

/// Maximum entry and the lowest index attaining it.
pub fn peak_probability(p: &ProbVector) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut idx = 0;
    for (i, &x) in p.probs().iter().enumerate() {
        if x > best {
            best = x;
            idx = i;
        }
    }
    (best, idx)
}

/// KL(p || q) in nats; q is clamped below by [`LOG_EPS`].
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.class_count() != q.class_count() {
        return Err(Error::DimensionMismatch {
            expected: p.class_count(),
            got: q.class_count(),
        });
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.probs().iter().zip(q.probs()) {
        if pi > 0.0 {
            acc += pi * (pi / qi.max(LOG_EPS)).ln();
        }
    }
    Ok(acc)
}

/// Cross-entropy -ln(p[label]) in nats, with the [`LOG_EPS`] clamp.
pub fn cross_entropy(p: &ProbVector, label: usize) -> Result<f64> {
    if label >= p.class_count() {
        return Err(Error::InvalidLabel {
            label,
            classes: p.class_count(),
        });
    }
    Ok(-(p.probs()[label].max(LOG_EPS)).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = softmax(&Knowledge::new(vec![0.0, 0.0, 0.0]).unwrap());
        for &x in p.probs() {
            assert_relative_eq!(x, 1.0 / 3.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn softmax_hand_value() {
        // exp = (2, 1, 1), normalized.
        let p = softmax(&Knowledge::new(vec![2.0_f64.ln(), 0.0, 0.0]).unwrap());
        assert_relative_eq!(p.probs()[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(p.probs()[1], 0.25, max_relative = 1e-12);
        assert_relative_eq!(p.probs()[2], 0.25, max_relative = 1e-12);
    }

    #[test]
    fn knowledge_rejects_non_finite() {
        assert!(Knowledge::new(vec![1.0, f64::NAN]).is_err());
        assert!(Knowledge::new(vec![f64::INFINITY]).is_err());
        assert!(Knowledge::new(vec![]).is_err());
    }

    #[test]
    fn entropy_values() {
        assert_relative_eq!(shannon_entropy(&pv(&[0.25; 4])), 2.0, max_relative = 1e-12);
        assert_eq!(shannon_entropy(&pv(&[1.0, 0.0, 0.0])), 0.0);
        // 0.5*1 + 0.25*2 + 0.25*2
        assert_relative_eq!(
            shannon_entropy(&pv(&[0.5, 0.25, 0.25])),
            1.5,
            max_relative = 1e-12
        );
    }

    #[test]
    fn peak_breaks_ties_to_lowest_index() {
        assert_eq!(peak_probability(&pv(&[0.6, 0.3, 0.1])), (0.6, 0));
        assert_eq!(peak_probability(&pv(&[0.4, 0.4, 0.2])), (0.4, 0));
        let (v, i) = peak_probability(&ProbVector::uniform(3));
        assert_relative_eq!(v, 1.0 / 3.0, max_relative = 1e-15);
        assert_eq!(i, 0);
    }

    #[test]
    fn kl_hand_values() {
        let p = pv(&[0.5, 0.5]);
        assert_relative_eq!(kl_divergence(&p, &p).unwrap(), 0.0, epsilon = 1e-15);

        // 0.5*ln2 + 0.5*ln(2/3)
        let q = pv(&[0.25, 0.75]);
        let expected = 0.5 * 2.0_f64.ln() + 0.5 * (2.0 / 3.0_f64).ln();
        assert_relative_eq!(kl_divergence(&p, &q).unwrap(), expected, max_relative = 1e-12);
        assert_relative_eq!(expected, 0.1438, epsilon = 5e-5);

        // One-hot against uniform: ln 2, with 0*ln0 = 0.
        let onehot = pv(&[1.0, 0.0]);
        assert_relative_eq!(
            kl_divergence(&onehot, &p).unwrap(),
            2.0_f64.ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn kl_length_mismatch() {
        let p = pv(&[0.5, 0.5]);
        let q = ProbVector::uniform(3);
        assert!(matches!(
            kl_divergence(&p, &q),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cross_entropy_values() {
        assert_relative_eq!(
            cross_entropy(&pv(&[0.5, 0.25, 0.25]), 0).unwrap(),
            2.0_f64.ln(),
            max_relative = 1e-12
        );
        assert_eq!(cross_entropy(&pv(&[1.0, 0.0, 0.0]), 0).unwrap(), 0.0);
        assert_relative_eq!(
            cross_entropy(&ProbVector::uniform(3), 2).unwrap(),
            3.0_f64.ln(),
            max_relative = 1e-12
        );
        assert!(matches!(
            cross_entropy(&pv(&[1.0, 0.0]), 2),
            Err(Error::InvalidLabel { .. })
        ));
    }

    proptest! {
        #[test]
        fn softmax_lands_in_simplex(values in proptest::collection::vec(-50.0f64..50.0, 1..32)) {
            let p = softmax(&Knowledge::new(values).unwrap());
            prop_assert!(ProbVector::new(p.probs().to_vec()).is_ok());
        }

        #[test]
        fn softmax_preserves_order(values in proptest::collection::vec(-50.0f64..50.0, 2..16)) {
            let p = softmax(&Knowledge::new(values.clone()).unwrap());
            for i in 0..values.len() {
                for j in 0..values.len() {
                    if values[i] >= values[j] {
                        prop_assert!(p.probs()[i] >= p.probs()[j]);
                    }
                }
            }
        }

        #[test]
        fn softmax_is_shift_invariant(
            values in proptest::collection::vec(-20.0f64..20.0, 1..16),
            shift in -100.0f64..100.0,
        ) {
            let a = softmax(&Knowledge::new(values.clone()).unwrap());
            let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
            let b = softmax(&Knowledge::new(shifted).unwrap());
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn entropy_bounded_and_uniform_is_max(values in proptest::collection::vec(-30.0f64..30.0, 2..24)) {
            let c = values.len();
            let h = shannon_entropy(&softmax(&Knowledge::new(values).unwrap()));
            prop_assert!(h >= 0.0 && h <= (c as f64).log2() + 1e-12);
            let hu = shannon_entropy(&ProbVector::uniform(c));
            prop_assert!((hu - (c as f64).log2()).abs() < 1e-9);
        }

        #[test]
        fn kl_is_nonnegative(
            a in proptest::collection::vec(0.01f64..10.0, 2..12),
            b in proptest::collection::vec(0.01f64..10.0, 2..12),
        ) {
            let n = a.len().min(b.len());
            let norm = |v: &[f64]| {
                let s: f64 = v.iter().sum();
                ProbVector::new(v.iter().map(|x| x / s).collect()).unwrap()
            };
            let p = norm(&a[..n]);
            let q = norm(&b[..n]);
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        }
    }
}
