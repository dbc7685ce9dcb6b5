//! Scalar abstraction shared by the numeric kernels.
//!
//! The closed-form pieces of the model (hazard integrals, lattice assembly,
//! ordinal link, prior densities, ranking metrics) are written against
//! [`Scalar`] so they can be evaluated in `f32` for quick scoring or `f64`
//! for training. The optimizer and variational machinery are `f64` only.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point type usable by the model kernels: `f32` or `f64`.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("representable count")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else if x < T::lit(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] on `(0, ∞)`.
#[inline]
pub fn softplus_inverse<T: Scalar>(y: T) -> T {
    if y > T::lit(30.0) {
        y
    } else {
        // log(exp(y) - 1)
        y.exp_m1().ln()
    }
}

/// Logistic function.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)`, stable for large `|x|`.
#[inline]
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    -softplus(-x)
}

/// Log density of `N(mean, sd²)` at `x`.
#[inline]
pub fn normal_log_density<T: Scalar>(x: T, mean: T, sd: T) -> T {
    let z = (x - mean) / sd;
    -T::lit(0.5) * z * z - sd.ln() - T::lit(0.5) * (T::lit(2.0) * T::PI()).ln()
}

/// Log density of the standard half-Cauchy (scale 1) at `x > 0`.
#[inline]
pub fn half_cauchy_log_density<T: Scalar>(x: T) -> T {
    (T::lit(2.0) / T::PI()).ln() - (T::one() + x * x).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_round_trip() {
        for &y in &[1e-8, 0.1, 1.0, 5.0, 40.0] {
            let x = softplus_inverse(y);
            assert!((softplus(x) - y).abs() <= 1e-12 * y.max(1.0), "y={y}");
        }
    }

    #[test]
    fn sigmoid_tails_are_finite() {
        assert_eq!(sigmoid(1000.0_f64), 1.0);
        assert_eq!(sigmoid(-1000.0_f64), 0.0);
        assert!((log_sigmoid(-1000.0_f64) + 1000.0).abs() < 1e-9);
        assert!((sigmoid(0.3_f32) - 0.574_442_5).abs() < 1e-6);
    }

    #[test]
    fn unit_densities() {
        let g = normal_log_density(0.0_f64, 0.0, 1.0);
        assert!((g + 0.918_938_533_204_672_7).abs() < 1e-12);
        let hc = half_cauchy_log_density(1.0_f64);
        assert!((hc + std::f64::consts::PI.ln()).abs() < 1e-12);
    }
}
