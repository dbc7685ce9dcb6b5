//! Piecewise exponential survival kernels.
//!
//! The hazard is constant on each interval `[b_{i-1}, b_i)` with `b_0 = 0`
//! and the final interval extending to infinity. With per-interval rates
//! `λ_i`, the cumulative hazard is `Λ(t) = Σ_i λ_i·|[0,t] ∩ interval_i|`,
//! the survival function `S(t) = exp(−Λ(t))` and the density
//! `f(t) = λ(t)·exp(−Λ(t))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::NUM_PLACEMENTS;
use crate::scalar::Scalar;

/// Number of entries in the intervention covariate vector.
pub const INTERVENTION_DIM: usize = 2 * (NUM_PLACEMENTS - 1);

/// Interior interval boundaries in days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Breakpoints<T>(Vec<T>);

impl<T: Scalar> Default for Breakpoints<T> {
    /// One, four and nine weeks.
    fn default() -> Self {
        Self(vec![T::lit(7.0), T::lit(28.0), T::lit(63.0)])
    }
}

impl<T: Scalar> Breakpoints<T> {
    pub fn new(bounds: Vec<T>) -> Result<Self> {
        if bounds.iter().any(|&b| !(b > T::zero() && b.is_finite())) {
            return Err(Error::invalid("breakpoints must be positive and finite"));
        }
        if bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("breakpoints must be strictly increasing"));
        }
        Ok(Self(bounds))
    }

    pub fn bounds(&self) -> &[T] {
        &self.0
    }

    pub fn n_intervals(&self) -> usize {
        self.0.len() + 1
    }

    /// Interval containing `t` (intervals are closed on the left).
    pub fn interval_of(&self, t: T) -> usize {
        self.0.iter().take_while(|&&b| t >= b).count()
    }

    /// Time spent in each interval by `[0, t]`.
    pub fn exposures(&self, t: T, out: &mut [T]) {
        let mut lo = T::zero();
        for (i, slot) in out.iter_mut().enumerate() {
            let hi = self.0.get(i).copied().unwrap_or_else(T::infinity);
            *slot = if t <= lo { T::zero() } else { t.min(hi) - lo };
            lo = hi;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalObservation<T> {
    pub t: T,
    pub event: bool,
}

impl<T: Scalar> SurvivalObservation<T> {
    pub fn new(t: T, event: bool) -> Result<Self> {
        if !(t > T::zero() && t.is_finite()) {
            return Err(Error::invalid(format!("survival time {t} must be positive and finite")));
        }
        Ok(Self { t, event })
    }
}

/// `Λ(t)` for per-interval rates.
pub fn cumulative_hazard<T: Scalar>(t: T, hazards: &[T], breakpoints: &Breakpoints<T>) -> T {
    debug_assert_eq!(hazards.len(), breakpoints.n_intervals());
    let mut lo = T::zero();
    let mut total = T::zero();
    for (i, &rate) in hazards.iter().enumerate() {
        if t <= lo {
            break;
        }
        let hi = breakpoints.0.get(i).copied().unwrap_or_else(T::infinity);
        total = total + rate * (t.min(hi) - lo);
        lo = hi;
    }
    total
}

/// Inverse of `Λ`: the time at which the cumulative hazard reaches `target`.
/// Returns infinity when the final rate is zero and the target is unreachable.
pub fn inverse_cumulative_hazard<T: Scalar>(target: T, hazards: &[T], breakpoints: &Breakpoints<T>) -> T {
    let mut lo = T::zero();
    let mut remaining = target;
    for (i, &rate) in hazards.iter().enumerate() {
        let hi = breakpoints.0.get(i).copied().unwrap_or_else(T::infinity);
        let capacity = rate * (hi - lo);
        if remaining <= capacity || hi.is_infinite() {
            return if rate > T::zero() { lo + remaining / rate } else { T::infinity() };
        }
        remaining = remaining - capacity;
        lo = hi;
    }
    T::infinity()
}

/// Log density (event) or log survival (censored) under per-interval
/// log-hazards.
pub fn log_likelihood<T: Scalar>(
    obs: &SurvivalObservation<T>,
    log_hazards: &[T],
    breakpoints: &Breakpoints<T>,
) -> T {
    let rates: Vec<T> = log_hazards.iter().map(|h| h.exp()).collect();
    let cum = cumulative_hazard(obs.t, &rates, breakpoints);
    if obs.event {
        log_hazards[breakpoints.interval_of(obs.t)] - cum
    } else {
        -cum
    }
}

/// `P(T ≤ horizon) = 1 − exp(−Λ(horizon))`.
pub fn event_probability<T: Scalar>(log_hazards: &[T], breakpoints: &Breakpoints<T>, horizon: T) -> T {
    let rates: Vec<T> = log_hazards.iter().map(|h| h.exp()).collect();
    -(-cumulative_hazard(horizon, &rates, breakpoints)).exp_m1()
}

/// `[P(I≥1), …, P(I≥5), 1{I≥1}, …, 1{I≥5}]`.
pub fn build_intervention_covariates<T: Scalar>(
    placement: usize,
    exceedance: &[T],
) -> Result<[T; INTERVENTION_DIM]> {
    const K: usize = NUM_PLACEMENTS - 1;
    if placement >= NUM_PLACEMENTS {
        return Err(Error::invalid(format!("placement {placement} outside 0..=5")));
    }
    if exceedance.len() != K {
        return Err(Error::Dimension {
            context: "exceedance probabilities",
            expected: K,
            actual: exceedance.len(),
        });
    }
    if exceedance.iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
        return Err(Error::invalid("exceedance probabilities must lie in [0, 1]"));
    }
    let mut v = [T::zero(); INTERVENTION_DIM];
    v[..K].copy_from_slice(exceedance);
    for k in 0..K {
        if placement > k {
            v[K + k] = T::one();
        }
    }
    Ok(v)
}
