//! Dense real arithmetic in double precision.
//!
//! [`Matrix`] is the storage type for parameters and batches, [`graph`]
//! records differentiable operations over matrices, and the free functions
//! here are the plain scalar primitives the losses are assembled from.

pub mod graph;
mod matrix;
pub mod pca;

pub use graph::{Gradients, Graph, Var};
pub use matrix::Matrix;

use crate::{Error, Result};

/// Squared Euclidean distance `Σ_k (a_k − b_k)²`.
pub fn euclidean_sq(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `log Σ exp(v_j)`, stabilized by the running maximum.
pub fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Temperature softmax `exp(v_j/τ) / Σ_k exp(v_k/τ)` with max-subtraction.
pub fn softmax(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("softmax temperature must be > 0, got {tau}")));
    }
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| ((x - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Shannon entropy in nats with `0 · ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    if p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::invalid("probability vector has negative or non-finite entries"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("probabilities sum to {total}, expected 1")));
    }
    Ok(-p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>())
}

/// Central-difference gradient of `f` at `params`.
///
/// Used as the reference against which the tape's gradients are checked.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::invalid(format!("step {eps} outside [1e-6, 1e-4]")));
    }
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe);
        probe[i] = orig - eps;
        let lo = f(&probe);
        probe[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite when probing coordinate {i}"
            )));
        }
        grad.push((hi - lo) / (2.0 * eps));
    }
    Ok(grad)
}

/// Largest elementwise relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn euclidean_sq_examples() {
        assert_eq!(euclidean_sq(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        let a = [1.5, -2.0, 7.25];
        assert_eq!(euclidean_sq(&a, &a).unwrap(), 0.0);
        assert!(matches!(
            euclidean_sq(&[1.0], &[1.0, 2.0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn euclidean_sq_matches_loop_oracle() {
        let mut rng = crate::rng::rng_from_seed(11);
        let a: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut oracle = 0.0;
        for k in 0..16 {
            let d = a[k] - b[k];
            oracle += d * d;
        }
        assert!((euclidean_sq(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[2.5, 2.5, 2.5], 1.0).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[0.0, 3f64.ln()], 1.0).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);

        // oracle on the shifted inputs [0, 1]
        let e1 = 1f64.exp();
        let oracle = [1.0 / (1.0 + e1), e1 / (1.0 + e1)];
        let p = softmax(&[1000.0, 1001.0], 1.0).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p[0] - oracle[0]).abs() < 1e-12 && (p[1] - oracle[1]).abs() < 1e-12);
        assert!((p[0] - 0.2689).abs() < 1e-4);

        assert!(matches!(softmax(&[1.0], 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(softmax(&[1.0], -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn entropy_examples() {
        for m in 1..10 {
            let p = vec![1.0 / m as f64; m];
            assert!((shannon_entropy(&p).unwrap() - (m as f64).ln()).abs() < 1e-12);
        }
        assert_eq!(shannon_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let direct = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        let h = shannon_entropy(&[0.25, 0.75]).unwrap();
        assert!((h - direct).abs() < 1e-15);
        assert!((h - 0.562335).abs() < 1e-6);
        assert!(matches!(
            shannon_entropy(&[-0.1, 1.1]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 4.0, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        assert!(matches!(
            finite_diff_grad(|p| p[0].ln(), &[0.0], 1e-5),
            Err(Error::Numeric(_))
        ));
        assert!(finite_diff_grad(|p| p[0], &[0.0], 1e-2).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..12),
            shift in -1e4f64..1e4,
            tau in 0.1f64..10.0,
        ) {
            let p = softmax(&v, tau).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted, tau).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn entropy_is_bounded(w in prop::collection::vec(0.0f64..1.0, 1..12)) {
            let total: f64 = w.iter().sum();
            prop_assume!(total > 1e-6);
            let p: Vec<f64> = w.iter().map(|x| x / total).collect();
            let h = shannon_entropy(&p).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn euclidean_sq_symmetric_and_zero_iff_equal(
            a in prop::collection::vec(-10.0f64..10.0, 4),
            b in prop::collection::vec(-10.0f64..10.0, 4),
        ) {
            let ab = euclidean_sq(&a, &b).unwrap();
            prop_assert_eq!(ab, euclidean_sq(&b, &a).unwrap());
            prop_assert_eq!(ab == 0.0, a == b);
        }
    }
}
