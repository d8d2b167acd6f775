//! Dense double-precision arithmetic shared by every other module.
//!
//! Vectors are plain `&[f64]` slices; [`Matrix`] adds a fixed shape on top of
//! a row-major buffer. Values entering the library through public
//! constructors are checked for finiteness.

mod gradcheck;
mod matrix;
mod rng;

pub use gradcheck::{grad_check, DEFAULT_GRAD_CHECK_EPS};
pub use matrix::Matrix;
pub use rng::{RngState, Stream};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A probability vector over the ID classes.
///
/// Every entry lies in `[0, 1]` and the entries sum to one within `1e-9`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Probabilities(Vec<f64>);

impl Probabilities {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("probability vector is empty"));
        }
        if values.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(invalid("probabilities must lie in [0, 1]"));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Probabilities(values))
    }

    pub fn uniform(classes: usize) -> Self {
        Probabilities(vec![1.0 / classes as f64; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Probabilities {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(invalid(format!("{what}: non-finite value at index {i}"))),
        None => Ok(()),
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Result<Probabilities> {
    if logits.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    ensure_finite(logits, "softmax input")?;
    Ok(Probabilities(softmax_unchecked(logits)))
}

/// Softmax without the boundary checks; callers guarantee finite, nonempty input.
pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// `ln Σ exp(z)`, computed with max-subtraction.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// `Σ (uᵢ − vᵢ)²`.
pub fn squared_euclidean(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(invalid(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    Ok(sq_dist(u, v))
}

#[inline]
pub(crate) fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Index of the smallest entry; ties resolve to the lowest index.
pub fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v >= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

pub(crate) fn numerical(msg: impl Into<String>) -> Error {
    Error::Numerical(msg.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);

        // Reference values from an independent 50-digit evaluation of
        // e^z / Σ e^z for z = (2, 1, 0).
        let p = softmax(&[2.0, 1.0, 0.0]).unwrap();
        let expected = [0.665_240_955_774_821_6, 0.244_728_471_054_797_6, 0.090_030_573_170_380_46];
        for (a, b) in p.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-4);
            assert!((a - b).abs() < 1e-12);
        }

        let p = softmax(&[5.0, 5.0, 5.0]).unwrap();
        for v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax(&[]), Err(Error::InvalidInput(_))));
        assert!(matches!(softmax(&[1.0, f64::NAN]), Err(Error::InvalidInput(_))));
        assert!(matches!(softmax(&[f64::INFINITY]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[800.0, 0.0, -800.0]).unwrap();
        assert_eq!(p.as_slice()[0], 1.0);
        assert!(p.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn squared_euclidean_examples() {
        assert_eq!(squared_euclidean(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert_eq!(squared_euclidean(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(squared_euclidean(&[1.0, 2.0, 3.0], &[4.0, 6.0, 3.0]).unwrap(), 25.0);
        assert!(matches!(
            squared_euclidean(&[1.0], &[1.0, 2.0]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn arg_ties_pick_lowest_index() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), Some(0));
        assert_eq!(argmin(&[3.0, 1.0, 1.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn softmax_sums_to_one_at_large_dimension() {
        let mut rng = RngState::new(11);
        let logits: Vec<f64> = (0..10_000).map(|_| 50.0 * rng.normal()).collect();
        let p = softmax(&logits).unwrap();
        let total: f64 = p.as_slice().iter().sum();
        assert!((total - 1.0).abs() <= 1e-9);
    }

    proptest! {
        #[test]
        fn softmax_is_normalized(logits in prop::collection::vec(-700.0f64..700.0, 1..64)) {
            let p = softmax(&logits).unwrap();
            let total: f64 = p.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            prop_assert!(p.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn softmax_is_shift_invariant(
            logits in prop::collection::vec(-50.0f64..50.0, 1..32),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn squared_euclidean_is_symmetric(
            pair in (1usize..16).prop_flat_map(|n| (
                prop::collection::vec(-1e3f64..1e3, n),
                prop::collection::vec(-1e3f64..1e3, n),
            ))
        ) {
            let (u, v) = pair;
            prop_assert_eq!(squared_euclidean(&u, &v).unwrap(), squared_euclidean(&v, &u).unwrap());
            prop_assert_eq!(squared_euclidean(&u, &u).unwrap(), 0.0);
        }
    }
}
