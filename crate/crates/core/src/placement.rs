//! Ordinal (cumulative-logit) model for discharge placement.
//!
//! `P(I ≥ k) = σ(ν_k + ξ'x)` for `k = 1..5`, and category probabilities are
//! successive differences of the exceedance curve. For the category
//! probabilities to be non-negative the thresholds must be non-increasing
//! in `k`; [`threshold_transform`] maps an unconstrained vector onto that
//! ordering: `ν_1 = u_1`, `ν_{k+1} = ν_k − softplus(u_{k+1})`.

use crate::error::{Error, Result};
use crate::ingest::NUM_PLACEMENTS;
use crate::scalar::{log_sigmoid, sigmoid, softplus, Scalar};

/// Number of thresholds (placements minus one).
pub const N_THRESHOLDS: usize = NUM_PLACEMENTS - 1;

/// Unconstrained vector to strictly ordered (descending) thresholds.
pub fn threshold_transform<T: Scalar>(u: &[T]) -> [T; N_THRESHOLDS] {
    debug_assert_eq!(u.len(), N_THRESHOLDS);
    let mut nu = [T::zero(); N_THRESHOLDS];
    nu[0] = u[0];
    for k in 1..N_THRESHOLDS {
        nu[k] = nu[k - 1] - softplus(u[k]);
    }
    nu
}

/// Chain rule through [`threshold_transform`]: maps `∂f/∂ν` to `∂f/∂u`.
pub fn threshold_transform_grad<T: Scalar>(u: &[T], grad_nu: &[T]) -> [T; N_THRESHOLDS] {
    let mut g = [T::zero(); N_THRESHOLDS];
    // suffix sums of ∂f/∂ν_k
    let mut tail = T::zero();
    for k in (0..N_THRESHOLDS).rev() {
        tail = tail + grad_nu[k];
        g[k] = if k == 0 { tail } else { -sigmoid(u[k]) * tail };
    }
    g
}

fn check_ordered<T: Scalar>(nu: &[T]) -> Result<()> {
    if nu.len() != N_THRESHOLDS {
        return Err(Error::Dimension {
            context: "ordinal thresholds",
            expected: N_THRESHOLDS,
            actual: nu.len(),
        });
    }
    if nu.windows(2).any(|w| w[1] > w[0]) || nu.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("ordinal thresholds must be non-increasing"));
    }
    Ok(())
}

/// `P(I ≥ k)` for `k = 1..5` given thresholds and the linear shift `ξ'x`.
pub fn exceedance_probs<T: Scalar>(nu: &[T], shift: T) -> Result<[T; N_THRESHOLDS]> {
    check_ordered(nu)?;
    let mut p = [T::zero(); N_THRESHOLDS];
    for (pk, &v) in p.iter_mut().zip(nu) {
        *pk = sigmoid(v + shift);
    }
    Ok(p)
}

/// `p_k = P(I≥k) − P(I≥k+1)` with `P(I≥0) = 1`, `P(I≥6) = 0`.
pub fn category_probs<T: Scalar>(exceedance: &[T]) -> Result<[T; NUM_PLACEMENTS]> {
    if exceedance.len() != N_THRESHOLDS {
        return Err(Error::Dimension {
            context: "exceedance probabilities",
            expected: N_THRESHOLDS,
            actual: exceedance.len(),
        });
    }
    let mut p = [T::zero(); NUM_PLACEMENTS];
    let mut upper = T::one();
    for k in 0..NUM_PLACEMENTS {
        let lower = exceedance.get(k).copied().unwrap_or_else(T::zero);
        let d = upper - lower;
        if d < T::zero() || d.is_nan() {
            return Err(Error::invalid(format!(
                "exceedance curve increases at category {k}; thresholds out of order"
            )));
        }
        p[k] = d;
        upper = lower;
    }
    Ok(p)
}

pub fn placement_log_likelihood<T: Scalar>(placement: usize, probs: &[T]) -> Result<T> {
    probs
        .get(placement)
        .map(|p| p.ln())
        .ok_or_else(|| Error::invalid(format!("placement {placement} outside 0..=5")))
}

/// `log p_I` computed directly from the exceedance logits
/// `a_k = ν_k + ξ'x`, together with `∂ log p_I / ∂a_k`.
///
/// Uses `σ(a) − σ(b) = σ(a)·σ(−b)·(1 − e^{b−a})` so that adjacent, nearly
/// equal thresholds do not cancel catastrophically.
pub fn log_category_prob_with_grad<T: Scalar>(
    placement: usize,
    logits: &[T],
) -> (T, [T; N_THRESHOLDS]) {
    let mut grad = [T::zero(); N_THRESHOLDS];
    let last = N_THRESHOLDS;
    if placement == 0 {
        let a = logits[0];
        grad[0] = -sigmoid(a);
        (log_sigmoid(-a), grad)
    } else if placement == last {
        let a = logits[last - 1];
        grad[last - 1] = sigmoid(-a);
        (log_sigmoid(a), grad)
    } else {
        let (a, b) = (logits[placement - 1], logits[placement]);
        let gap = a - b;
        let lp = log_sigmoid(a) + log_sigmoid(-b) + (-(-gap).exp()).ln_1p();
        let inv = T::one() / gap.exp_m1();
        grad[placement - 1] = sigmoid(-a) + inv;
        grad[placement] = -sigmoid(b) - inv;
        (lp, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn near_equal_thresholds_in_the_limit() {
        let nu = threshold_transform(&[0.0, -40.0, -40.0, -40.0, -40.0]);
        for k in 1..5 {
            let gap = nu[k - 1] - nu[k];
            assert!(gap > 0.0 && gap < 1e-16, "gap {gap}");
        }
    }

    #[test]
    fn ordering_holds_for_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let u: Vec<f64> = (0..5).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let nu = threshold_transform(&u);
            assert!(nu.windows(2).all(|w| w[1] < w[0]));
            let p = category_probs(&exceedance_probs(&nu, rng.gen_range(-5.0..5.0)).unwrap()).unwrap();
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    /// Direct scalar logistic arithmetic, kept independent of `sigmoid`.
    fn logistic(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn exceedance_example() {
        let nu = [2.0, 1.0, 0.0, -1.0, -2.0];
        let p = exceedance_probs(&nu, 0.0).unwrap();
        let expected = [0.880_797, 0.731_059, 0.5, 0.268_941, 0.119_203];
        for k in 0..5 {
            assert!((p[k] - logistic(nu[k])).abs() < 1e-15);
            assert!((p[k] - expected[k]).abs() < 1e-6);
        }
        let shifted = exceedance_probs(&nu, 0.7).unwrap();
        for k in 0..5 {
            assert!((shifted[k] - logistic(nu[k] + 0.7)).abs() < 1e-15);
        }
        let saturated = exceedance_probs(&[800.0; 5], 0.0).unwrap();
        assert_eq!(saturated, [1.0; 5]);
        assert!(exceedance_probs(&[0.0, 1.0, 0.0, -1.0, -2.0], 0.0).is_err());
    }

    #[test]
    fn category_example() {
        let exc: [f64; 5] = [0.880_797, 0.731_059, 0.5, 0.268_941, 0.119_203];
        let p = category_probs(&exc).unwrap();
        // successive differences
        let mut prev = 1.0;
        for k in 0..6 {
            let next = if k < 5 { exc[k] } else { 0.0 };
            assert!((p[k] - (prev - next)).abs() < 1e-15);
            prev = next;
        }
        let expected: [f64; 6] = [0.119_203, 0.149_738, 0.231_059, 0.231_059, 0.149_738, 0.119_203];
        for k in 0..6 {
            assert!((p[k] - expected[k]).abs() < 1e-6);
        }
        let top = category_probs(&[1.0 - 1e-12; 5]).unwrap();
        assert!(top[5] > 0.999_999);
        let bottom = category_probs(&[1e-12; 5]).unwrap();
        assert!(bottom[0] > 0.999_999);
        assert!(category_probs(&[0.2, 0.5, 0.1, 0.0, 0.0]).is_err());
    }

    #[test]
    fn log_likelihood_examples() {
        let uniform = [1.0f64 / 6.0; 6];
        assert!((placement_log_likelihood(3, &uniform).unwrap() + 1.791_759).abs() < 1e-6);
        let certain = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(placement_log_likelihood(2, &certain).unwrap(), 0.0);
        assert!(placement_log_likelihood(6, &uniform).is_err());
    }

    #[test]
    fn stable_log_prob_matches_naive_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let u: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let nu = threshold_transform(&u);
            let shift = rng.gen_range(-2.0..2.0);
            let logits: Vec<f64> = nu.iter().map(|v| v + shift).collect();
            let probs = category_probs(&exceedance_probs(&nu, shift).unwrap()).unwrap();
            for i in 0..6 {
                let (lp, g) = log_category_prob_with_grad(i, &logits);
                assert!((lp - probs[i].ln()).abs() < 1e-9);
                for k in 0..5 {
                    let h = 1e-6;
                    let mut up = logits.clone();
                    up[k] += h;
                    let mut dn = logits.clone();
                    dn[k] -= h;
                    let fd = (log_category_prob_with_grad(i, &up).0 - log_category_prob_with_grad(i, &dn).0)
                        / (2.0 * h);
                    assert!((fd - g[k]).abs() < 1e-5 * (1.0 + g[k].abs()), "i={i} k={k}");
                }
            }
        }
    }

    #[test]
    fn threshold_gradient_matches_finite_differences() {
        let u = [0.3, -0.4, 1.2, 0.0, -2.0];
        let w = [0.5, -1.0, 2.0, 0.25, 1.5];
        let f = |u: &[f64]| -> f64 { threshold_transform(u).iter().zip(&w).map(|(a, b)| a * b).sum() };
        let g = threshold_transform_grad(&u, &w);
        for k in 0..5 {
            let mut up = u;
            up[k] += 1e-6;
            let mut dn = u;
            dn[k] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }
}
