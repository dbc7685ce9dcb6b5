//! The joint placement/survival model over quilted parameters.
//!
//! For episode `n` in interval `i`:
//!
//! ```text
//! log λ_ni = α_i(κ) + β_i(κ)'x + γ_i(κ)'I_vec
//! P(I ≥ k) = σ(ν_k(κ) + ξ'x)
//! I_vec    = [P(I≥1) … P(I≥5), 1{I≥1} … 1{I≥5}]
//! ```
//!
//! Each of `α, β, γ, ν` is a [`LatticeDecomposition`] over its own lattice.
//! The five indicator entries of `γ` are constrained to be non-positive by
//! `−softplus` of the assembled value, and the assembled `ν` passes through
//! [`threshold_transform`]; component tensors themselves are unconstrained.
//!
//! [`JointModel`] exposes the log joint density over a flat unconstrained
//! parameter vector with its exact gradient, which is what the variational
//! trainer consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{clamp_divergent, Bijector, BlockDescriptor, LogJoint, VariationalPosterior};
use crate::ingest::{CohortCoords, EpisodeRecord};
use crate::placement::{
    exceedance_probs, log_category_prob_with_grad, threshold_transform, threshold_transform_grad,
    N_THRESHOLDS,
};
use crate::quilt::{LatticeDecomposition, LatticeLayout, LatticeSpec};
use crate::scalar::{half_cauchy_log_density, log_sigmoid, sigmoid, softplus, Scalar};
use crate::survival::{event_probability, Breakpoints, INTERVENTION_DIM};

/// Lattice axis names understood by the model.
pub const AXES: [&str; 4] = ["mdc", "history", "cc_mcc", "race"];

fn coord(c: &CohortCoords, axis: &str) -> Result<usize> {
    Ok(match axis {
        "mdc" => c.mdc,
        "history" => c.history_group,
        "cc_mcc" => c.cc_mcc,
        "race" => c.race,
        other => return Err(Error::invalid(format!("unknown lattice axis `{other}`"))),
    })
}

/// Multi-index of an episode on a lattice.
pub fn lattice_index(spec: &LatticeSpec, c: &CohortCoords) -> Result<Vec<usize>> {
    let kappa = spec
        .dims
        .iter()
        .map(|d| coord(c, &d.name))
        .collect::<Result<Vec<_>>>()?;
    spec.check_index(&kappa)?;
    Ok(kappa)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Prior scale of zero-order components.
    pub base_scale: f64,
    /// Multiplicative scale decay per interaction order.
    pub decay: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            base_scale: 5.0,
            decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_features: usize,
    #[serde(default)]
    pub feature_names: Vec<String>,
    pub breakpoints: Breakpoints<f64>,
    pub alpha_lattice: LatticeSpec,
    pub beta_lattice: LatticeSpec,
    pub gamma_lattice: LatticeSpec,
    pub nu_lattice: LatticeSpec,
    #[serde(default)]
    pub prior: PriorConfig,
    /// Feed placement probabilities into the hazard (the first five
    /// intervention covariates). Disabling gives the ablated model.
    #[serde(default = "yes")]
    pub use_probability_covariates: bool,
    /// Learn placement slopes `ξ` (otherwise `ξ = 0`).
    #[serde(default)]
    pub placement_slopes: bool,
    /// Horseshoe prior on assembled `β` within each `β` cohort cell.
    #[serde(default = "yes")]
    pub horseshoe_beta: bool,
}

fn yes() -> bool {
    true
}

impl ModelSpec {
    /// `α, γ, ν` over MDC × history × CC/MCC to second order, `β` over race
    /// to first order.
    pub fn standard(n_features: usize) -> Self {
        let cohort = LatticeSpec::new(&[("mdc", 26), ("history", 32), ("cc_mcc", 3)], 2)
            .expect("static lattice");
        Self {
            n_features,
            feature_names: Vec::new(),
            breakpoints: Breakpoints::default(),
            alpha_lattice: cohort.clone(),
            beta_lattice: LatticeSpec::new(&[("race", 5)], 1).expect("static lattice"),
            gamma_lattice: cohort.clone(),
            nu_lattice: cohort,
            prior: PriorConfig::default(),
            use_probability_covariates: true,
            placement_slopes: false,
            horseshoe_beta: true,
        }
    }

    pub fn n_intervals(&self) -> usize {
        self.breakpoints.n_intervals()
    }

    pub fn validate(&self) -> Result<()> {
        for l in [&self.alpha_lattice, &self.beta_lattice, &self.gamma_lattice, &self.nu_lattice] {
            l.validate()?;
            if let Some(d) = l.dims.iter().find(|d| !AXES.contains(&d.name.as_str())) {
                return Err(Error::invalid(format!("unknown lattice axis `{}`", d.name)));
            }
        }
        if !self.feature_names.is_empty() && self.feature_names.len() != self.n_features {
            return Err(Error::Dimension {
                context: "feature names",
                expected: self.n_features,
                actual: self.feature_names.len(),
            });
        }
        if !(self.prior.base_scale > 0.0 && self.prior.decay > 0.0 && self.prior.decay <= 1.0) {
            return Err(Error::invalid("prior needs base_scale > 0 and 0 < decay ≤ 1"));
        }
        Ok(())
    }

    pub fn feature_name(&self, j: usize) -> String {
        self.feature_names
            .get(j)
            .cloned()
            .unwrap_or_else(|| format!("x{j}"))
    }
}

/// Constrained-space model parameters (component tensors plus `ξ`).
#[derive(Debug, Clone, PartialEq)]
pub struct PemParameters<T> {
    pub breakpoints: Breakpoints<T>,
    /// Width: intervals.
    pub alpha: LatticeDecomposition<T>,
    /// Width: intervals × features, interval-major.
    pub beta: LatticeDecomposition<T>,
    /// Width: intervals × 10; entries 5..10 of each interval are raw
    /// (pre-constraint) indicator effects.
    pub gamma: LatticeDecomposition<T>,
    /// Width: 5, raw (pre-ordering) thresholds.
    pub nu: LatticeDecomposition<T>,
    /// Placement slopes; empty means `ξ = 0`.
    pub xi: Vec<T>,
    pub use_probability_covariates: bool,
}

impl<T: Scalar> PemParameters<T> {
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let ni = spec.n_intervals();
        let p = spec.n_features;
        Ok(Self {
            breakpoints: Breakpoints::new(spec.breakpoints.bounds().iter().map(|&b| T::lit(b)).collect())?,
            alpha: LatticeDecomposition::zeros(spec.alpha_lattice.clone(), ni)?,
            beta: LatticeDecomposition::zeros(spec.beta_lattice.clone(), ni * p)?,
            gamma: LatticeDecomposition::zeros(spec.gamma_lattice.clone(), ni * INTERVENTION_DIM)?,
            nu: LatticeDecomposition::zeros(spec.nu_lattice.clone(), N_THRESHOLDS)?,
            xi: if spec.placement_slopes { vec![T::zero(); p] } else { Vec::new() },
            use_probability_covariates: spec.use_probability_covariates,
        })
    }

    pub fn n_intervals(&self) -> usize {
        self.breakpoints.n_intervals()
    }

    pub fn n_features(&self) -> usize {
        self.beta.width() / self.n_intervals()
    }

    fn check_x(&self, x: &[u8]) -> Result<()> {
        if x.len() != self.n_features() {
            return Err(Error::Dimension {
                context: "covariate vector",
                expected: self.n_features(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Ordered thresholds for a cohort.
    pub fn thresholds(&self, c: &CohortCoords) -> Result<[T; N_THRESHOLDS]> {
        let raw = self.nu.assemble(&lattice_index(self.nu.spec(), c)?)?;
        Ok(threshold_transform(&raw))
    }

    pub fn exceedance(&self, c: &CohortCoords, x: &[u8]) -> Result<[T; N_THRESHOLDS]> {
        self.check_x(x)?;
        let shift = self
            .xi
            .iter()
            .zip(x)
            .filter(|(_, &b)| b == 1)
            .fold(T::zero(), |a, (&w, _)| a + w);
        exceedance_probs(&self.thresholds(c)?, shift)
    }

    /// Constrained `γ` for one cohort, `[interval][10]`.
    pub fn gamma_at(&self, c: &CohortCoords) -> Result<Vec<[T; INTERVENTION_DIM]>> {
        let raw = self.gamma.assemble(&lattice_index(self.gamma.spec(), c)?)?;
        Ok(raw
            .chunks(INTERVENTION_DIM)
            .map(|g| {
                let mut out = [T::zero(); INTERVENTION_DIM];
                for k in 0..INTERVENTION_DIM {
                    out[k] = if k < N_THRESHOLDS { g[k] } else { -softplus(g[k]) };
                }
                out
            })
            .collect())
    }

    /// Non-positive indicator effects `[interval][5]`.
    pub fn indicator_effects(&self, c: &CohortCoords) -> Result<Vec<[T; N_THRESHOLDS]>> {
        Ok(self
            .gamma_at(c)?
            .iter()
            .map(|g| {
                let mut out = [T::zero(); N_THRESHOLDS];
                out.copy_from_slice(&g[N_THRESHOLDS..]);
                out
            })
            .collect())
    }

    /// `log λ_i` for interval `i`.
    pub fn log_hazard(&self, c: &CohortCoords, x: &[u8], ivec: &[T], interval: usize) -> Result<T> {
        self.check_x(x)?;
        if ivec.len() != INTERVENTION_DIM {
            return Err(Error::Dimension {
                context: "intervention covariates",
                expected: INTERVENTION_DIM,
                actual: ivec.len(),
            });
        }
        if interval >= self.n_intervals() {
            return Err(Error::OutOfBounds {
                axis: "interval".into(),
                index: interval,
                size: self.n_intervals(),
            });
        }
        let p = self.n_features();
        let alpha = self.alpha.assemble(&lattice_index(self.alpha.spec(), c)?)?;
        let beta = self.beta.assemble(&lattice_index(self.beta.spec(), c)?)?;
        let gamma = &self.gamma_at(c)?[interval];
        let mut eta = alpha[interval];
        for (j, &b) in x.iter().enumerate() {
            if b == 1 {
                eta = eta + beta[interval * p + j];
            }
        }
        for k in 0..INTERVENTION_DIM {
            if k < N_THRESHOLDS && !self.use_probability_covariates {
                continue;
            }
            eta = eta + gamma[k] * ivec[k];
        }
        Ok(eta)
    }

    pub fn log_hazards(&self, c: &CohortCoords, x: &[u8], ivec: &[T]) -> Result<Vec<T>> {
        (0..self.n_intervals())
            .map(|i| self.log_hazard(c, x, ivec, i))
            .collect()
    }

    /// Intervention covariates implied by the model for an observed placement.
    pub fn intervention_vector(&self, c: &CohortCoords, x: &[u8], placement: usize) -> Result<[T; INTERVENTION_DIM]> {
        crate::survival::build_intervention_covariates(placement, &self.exceedance(c, x)?)
    }

    pub fn event_probability(&self, c: &CohortCoords, x: &[u8], ivec: &[T], horizon: T) -> Result<T> {
        Ok(event_probability(&self.log_hazards(c, x, ivec)?, &self.breakpoints, horizon))
    }
}

/// Per-row quantities cached for likelihood evaluation.
#[derive(Debug, Clone)]
struct PreparedRow {
    active: Vec<u32>,
    alpha_rows: Vec<usize>,
    beta_rows: Vec<usize>,
    gamma_rows: Vec<usize>,
    nu_rows: Vec<usize>,
    placement: usize,
    event_interval: Option<usize>,
    exposures: Vec<f64>,
}

/// Offsets of each parameter group inside the flat unconstrained vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub alpha: LatticeLayout,
    pub beta: LatticeLayout,
    pub gamma: LatticeLayout,
    pub nu: LatticeLayout,
    pub alpha_offset: usize,
    pub beta_offset: usize,
    pub gamma_offset: usize,
    pub nu_offset: usize,
    pub xi_offset: usize,
    pub n_xi: usize,
    /// Horseshoe local scales for `β`, one per (β cell, interval, feature).
    pub beta_local_offset: usize,
    pub n_beta_local: usize,
    /// Horseshoe global scale per `β` cell.
    pub beta_global_offset: usize,
    pub n_beta_global: usize,
    pub xi_local_offset: usize,
    pub xi_global_offset: usize,
    pub n_xi_scales: usize,
    pub dim: usize,
}

impl ModelLayout {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let ni = spec.n_intervals();
        let p = spec.n_features;
        let alpha = LatticeLayout::new(spec.alpha_lattice.clone(), ni)?;
        let beta = LatticeLayout::new(spec.beta_lattice.clone(), ni * p)?;
        let gamma = LatticeLayout::new(spec.gamma_lattice.clone(), ni * INTERVENTION_DIM)?;
        let nu = LatticeLayout::new(spec.nu_lattice.clone(), N_THRESHOLDS)?;
        let alpha_offset = 0;
        let beta_offset = alpha_offset + alpha.len;
        let gamma_offset = beta_offset + beta.len;
        let nu_offset = gamma_offset + gamma.len;
        let xi_offset = nu_offset + nu.len;
        let n_xi = if spec.placement_slopes { p } else { 0 };
        let beta_local_offset = xi_offset + n_xi;
        let beta_cells = spec.beta_lattice.n_cells();
        let (n_beta_local, n_beta_global) = if spec.horseshoe_beta {
            (beta_cells * ni * p, beta_cells)
        } else {
            (0, 0)
        };
        let beta_global_offset = beta_local_offset + n_beta_local;
        let xi_local_offset = beta_global_offset + n_beta_global;
        let n_xi_scales = if spec.placement_slopes { p } else { 0 };
        let xi_global_offset = xi_local_offset + n_xi_scales;
        let dim = xi_global_offset + usize::from(spec.placement_slopes);
        Ok(Self {
            alpha,
            beta,
            gamma,
            nu,
            alpha_offset,
            beta_offset,
            gamma_offset,
            nu_offset,
            xi_offset,
            n_xi,
            beta_local_offset,
            n_beta_local,
            beta_global_offset,
            n_beta_global,
            xi_local_offset,
            xi_global_offset,
            n_xi_scales,
            dim,
        })
    }

    /// Variational block descriptors.
    pub fn blocks(&self) -> Vec<BlockDescriptor> {
        let mut b = vec![
            BlockDescriptor::new("alpha", self.alpha_offset, self.alpha.len, Bijector::Identity),
            BlockDescriptor::new("beta", self.beta_offset, self.beta.len, Bijector::Identity),
            BlockDescriptor::new("gamma", self.gamma_offset, self.gamma.len, Bijector::Identity),
            BlockDescriptor::new("nu", self.nu_offset, self.nu.len, Bijector::Identity),
        ];
        if self.n_xi > 0 {
            b.push(BlockDescriptor::new("xi", self.xi_offset, self.n_xi, Bijector::Identity));
        }
        if self.n_beta_local > 0 {
            b.push(BlockDescriptor::new(
                "beta_local_scale",
                self.beta_local_offset,
                self.n_beta_local,
                Bijector::Softplus,
            ));
            b.push(BlockDescriptor::new(
                "beta_global_scale",
                self.beta_global_offset,
                self.n_beta_global,
                Bijector::Softplus,
            ));
        }
        if self.n_xi_scales > 0 {
            b.push(BlockDescriptor::new(
                "xi_local_scale",
                self.xi_local_offset,
                self.n_xi_scales,
                Bijector::Softplus,
            ));
            b.push(BlockDescriptor::new("xi_global_scale", self.xi_global_offset, 1, Bijector::Softplus));
        }
        b
    }

    /// Read the coefficient groups out of a flat unconstrained vector.
    pub fn parameters(&self, spec: &ModelSpec, u: &[f64]) -> Result<PemParameters<f64>> {
        if u.len() != self.dim {
            return Err(Error::Dimension {
                context: "flat parameter vector",
                expected: self.dim,
                actual: u.len(),
            });
        }
        let slice = |off: usize, len: usize| u[off..off + len].to_vec();
        Ok(PemParameters {
            breakpoints: spec.breakpoints.clone(),
            alpha: LatticeDecomposition::from_values(self.alpha.clone(), slice(self.alpha_offset, self.alpha.len))?,
            beta: LatticeDecomposition::from_values(self.beta.clone(), slice(self.beta_offset, self.beta.len))?,
            gamma: LatticeDecomposition::from_values(self.gamma.clone(), slice(self.gamma_offset, self.gamma.len))?,
            nu: LatticeDecomposition::from_values(self.nu.clone(), slice(self.nu_offset, self.nu.len))?,
            xi: slice(self.xi_offset, self.n_xi),
            use_probability_covariates: spec.use_probability_covariates,
        })
    }

    /// Data-derived starting means: pooled crude log-hazards per interval in
    /// the global `α` component and pooled empirical thresholds in the global
    /// `ν` component. Every other entry of `mean` is left untouched.
    pub fn warm_start(&self, spec: &ModelSpec, episodes: &[EpisodeRecord], mean: &mut [f64]) -> Result<()> {
        if mean.len() != self.dim {
            return Err(Error::Dimension {
                context: "warm start vector",
                expected: self.dim,
                actual: mean.len(),
            });
        }
        if episodes.is_empty() {
            return Err(Error::invalid("warm start needs at least one episode"));
        }
        let ni = spec.n_intervals();
        let mut events = vec![0.0; ni];
        let mut exposure = vec![0.0; ni];
        let mut buf = vec![0.0; ni];
        let mut at_least = [0.0; N_THRESHOLDS];
        for e in episodes {
            spec.breakpoints.exposures(e.wait_days, &mut buf);
            for (x, b) in exposure.iter_mut().zip(&buf) {
                *x += b;
            }
            if e.event {
                events[spec.breakpoints.interval_of(e.wait_days).min(ni - 1)] += 1.0;
            }
            for slot in at_least.iter_mut().take(e.placement as usize) {
                *slot += 1.0;
            }
        }
        let global = self.alpha_offset + self.alpha.components[0].offset;
        for i in 0..ni {
            mean[global + i] = ((events[i] + 0.5) / (exposure[i] + 1.0)).ln();
        }
        let n = episodes.len() as f64;
        let mut thresholds = [0.0; N_THRESHOLDS];
        let mut prev = f64::INFINITY;
        for (k, t) in thresholds.iter_mut().enumerate() {
            let f = (at_least[k] + 0.5) / (n + 1.0);
            *t = (f / (1.0 - f)).ln().min(prev - 1e-3);
            prev = *t;
        }
        let nu = self.nu_offset + self.nu.components[0].offset;
        Bijector::OrderedThresholds.inverse(&thresholds, &mut mean[nu..nu + N_THRESHOLDS]);
        Ok(())
    }

    /// Write coefficient groups into a flat vector (scales untouched).
    pub fn write_parameters(&self, params: &PemParameters<f64>, u: &mut [f64]) {
        u[self.alpha_offset..self.alpha_offset + self.alpha.len].copy_from_slice(&params.alpha.values);
        u[self.beta_offset..self.beta_offset + self.beta.len].copy_from_slice(&params.beta.values);
        u[self.gamma_offset..self.gamma_offset + self.gamma.len].copy_from_slice(&params.gamma.values);
        u[self.nu_offset..self.nu_offset + self.nu.len].copy_from_slice(&params.nu.values);
        u[self.xi_offset..self.xi_offset + self.n_xi].copy_from_slice(&params.xi);
    }
}

/// Rows per parallel likelihood chunk. Fixed so that reductions happen in
/// the same order regardless of thread count.
const CHUNK: usize = 512;

/// Log joint density of the placement/survival model for a dataset.
pub struct JointModel {
    pub spec: ModelSpec,
    pub layout: ModelLayout,
    rows: Vec<PreparedRow>,
    /// Prior standard deviation of every Gaussian-prior entry (0 = none).
    prior_sd: Vec<f64>,
    pool: Option<rayon::ThreadPool>,
}

impl JointModel {
    pub fn new(spec: ModelSpec, episodes: &[EpisodeRecord]) -> Result<Self> {
        Self::with_threads(spec, episodes, 1)
    }

    pub fn with_threads(spec: ModelSpec, episodes: &[EpisodeRecord], threads: usize) -> Result<Self> {
        let layout = ModelLayout::new(&spec)?;
        let ni = spec.n_intervals();
        let mut rows = Vec::with_capacity(episodes.len());
        for e in episodes {
            e.validate(spec.n_features)?;
            if !(e.wait_days > 0.0) {
                return Err(Error::invalid(format!(
                    "episode {}: survival model needs positive wait, got {}",
                    e.episode_id, e.wait_days
                )));
            }
            let mut exposures = vec![0.0; ni];
            spec.breakpoints.exposures(e.wait_days, &mut exposures);
            rows.push(PreparedRow {
                active: e
                    .covariates
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b == 1)
                    .map(|(j, _)| j as u32)
                    .collect(),
                alpha_rows: layout.alpha.rows(&lattice_index(&spec.alpha_lattice, &e.cohort)?)?,
                beta_rows: layout.beta.rows(&lattice_index(&spec.beta_lattice, &e.cohort)?)?,
                gamma_rows: layout.gamma.rows(&lattice_index(&spec.gamma_lattice, &e.cohort)?)?,
                nu_rows: layout.nu.rows(&lattice_index(&spec.nu_lattice, &e.cohort)?)?,
                placement: e.placement as usize,
                event_interval: e.event.then(|| spec.breakpoints.interval_of(e.wait_days)),
                exposures,
            });
        }
        let mut prior_sd = vec![0.0; layout.dim];
        let pc = spec.prior;
        for (lat, off) in [
            (&layout.alpha, layout.alpha_offset),
            (&layout.beta, layout.beta_offset),
            (&layout.gamma, layout.gamma_offset),
            (&layout.nu, layout.nu_offset),
        ] {
            for (slot, o) in prior_sd[off..off + lat.len].iter_mut().zip(lat.entry_orders()) {
                *slot = pc.base_scale * pc.decay.powi(o as i32);
            }
        }
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::invalid(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            spec,
            layout,
            rows,
            prior_sd,
            pool,
        })
    }

    /// Log-likelihood of one row; adds `weight · ∂ll/∂u` into `grad` when
    /// the value is finite.
    fn row_log_lik(&self, u: &[f64], r: &PreparedRow, weight: f64, grad: Option<&mut [f64]>) -> f64 {
        let l = &self.layout;
        let ni = self.spec.n_intervals();
        let p = self.spec.n_features;
        let use_probs = self.spec.use_probability_covariates;

        // Placement model.
        let mut nu_raw = [0.0; N_THRESHOLDS];
        for &row in &r.nu_rows {
            let base = l.nu_offset + row;
            for k in 0..N_THRESHOLDS {
                nu_raw[k] += u[base + k];
            }
        }
        let nu = threshold_transform(&nu_raw);
        let shift: f64 = if l.n_xi > 0 {
            r.active.iter().map(|&j| u[l.xi_offset + j as usize]).sum()
        } else {
            0.0
        };
        let mut logits = [0.0; N_THRESHOLDS];
        let mut probs = [0.0; N_THRESHOLDS];
        for k in 0..N_THRESHOLDS {
            logits[k] = nu[k] + shift;
            probs[k] = sigmoid(logits[k]);
        }
        let (ll_place, g_logit_place) = log_category_prob_with_grad(r.placement, &logits);

        // Hazard model.
        let mut eta = vec![0.0; ni];
        for &row in &r.alpha_rows {
            let base = l.alpha_offset + row;
            for (i, e) in eta.iter_mut().enumerate() {
                *e += u[base + i];
            }
        }
        for &row in &r.beta_rows {
            let base = l.beta_offset + row;
            for (i, e) in eta.iter_mut().enumerate() {
                for &j in &r.active {
                    *e += u[base + i * p + j as usize];
                }
            }
        }
        let mut gamma_raw = vec![0.0; ni * INTERVENTION_DIM];
        for &row in &r.gamma_rows {
            let base = l.gamma_offset + row;
            for (g, &v) in gamma_raw.iter_mut().zip(&u[base..base + ni * INTERVENTION_DIM]) {
                *g += v;
            }
        }
        for (i, e) in eta.iter_mut().enumerate() {
            let g = &gamma_raw[i * INTERVENTION_DIM..(i + 1) * INTERVENTION_DIM];
            if use_probs {
                for k in 0..N_THRESHOLDS {
                    *e += g[k] * probs[k];
                }
            }
            for k in 0..r.placement.min(N_THRESHOLDS) {
                *e -= softplus(g[N_THRESHOLDS + k]);
            }
        }
        let mut ll_surv = 0.0;
        let mut resid = vec![0.0; ni];
        for i in 0..ni {
            let cum = r.exposures[i] * eta[i].exp();
            ll_surv -= cum;
            resid[i] = -cum;
        }
        if let Some(j) = r.event_interval {
            ll_surv += eta[j];
            resid[j] += 1.0;
        }
        let ll = ll_place + ll_surv;
        let Some(grad) = grad else {
            return ll;
        };
        if !ll.is_finite() || resid.iter().any(|v| !v.is_finite()) {
            return ll;
        }

        for &row in &r.alpha_rows {
            let base = l.alpha_offset + row;
            for i in 0..ni {
                grad[base + i] += weight * resid[i];
            }
        }
        for &row in &r.beta_rows {
            let base = l.beta_offset + row;
            for i in 0..ni {
                let w = weight * resid[i];
                for &j in &r.active {
                    grad[base + i * p + j as usize] += w;
                }
            }
        }
        let mut g_gamma = vec![0.0; ni * INTERVENTION_DIM];
        let mut g_probs = [0.0; N_THRESHOLDS];
        for i in 0..ni {
            let g = &gamma_raw[i * INTERVENTION_DIM..(i + 1) * INTERVENTION_DIM];
            let gg = &mut g_gamma[i * INTERVENTION_DIM..(i + 1) * INTERVENTION_DIM];
            if use_probs {
                for k in 0..N_THRESHOLDS {
                    gg[k] = resid[i] * probs[k];
                    g_probs[k] += resid[i] * g[k];
                }
            }
            for k in 0..r.placement.min(N_THRESHOLDS) {
                gg[N_THRESHOLDS + k] = -resid[i] * sigmoid(g[N_THRESHOLDS + k]);
            }
        }
        for &row in &r.gamma_rows {
            let base = l.gamma_offset + row;
            for (slot, &v) in grad[base..base + ni * INTERVENTION_DIM].iter_mut().zip(&g_gamma) {
                *slot += weight * v;
            }
        }
        let mut g_logit = [0.0; N_THRESHOLDS];
        for k in 0..N_THRESHOLDS {
            g_logit[k] = g_logit_place[k] + g_probs[k] * probs[k] * (1.0 - probs[k]);
        }
        let g_nu_raw = threshold_transform_grad(&nu_raw, &g_logit);
        for &row in &r.nu_rows {
            let base = l.nu_offset + row;
            for k in 0..N_THRESHOLDS {
                grad[base + k] += weight * g_nu_raw[k];
            }
        }
        if l.n_xi > 0 {
            let g_shift: f64 = g_logit.iter().sum();
            for &j in &r.active {
                grad[l.xi_offset + j as usize] += weight * g_shift;
            }
        }
        ll
    }

    /// Per-row log-likelihoods (unclamped).
    pub fn row_log_likelihoods(&self, u: &[f64], rows: &[usize]) -> Vec<f64> {
        rows.iter()
            .map(|&n| self.row_log_lik(u, &self.rows[n], 0.0, None))
            .collect()
    }

    /// `Σ_batch clamped ll · scale`, gradient added into `grad`.
    fn batch_log_lik(&self, u: &[f64], batch: &[usize], scale: f64, grad: &mut [f64]) -> f64 {
        let eval_chunk = |chunk: &[usize]| -> (Vec<f64>, Vec<f64>) {
            let mut g = vec![0.0; grad.len()];
            let lls = chunk
                .iter()
                .map(|&n| self.row_log_lik(u, &self.rows[n], scale, Some(&mut g)))
                .collect();
            (lls, g)
        };
        let parts: Vec<(Vec<f64>, Vec<f64>)> = match &self.pool {
            Some(pool) if batch.len() > CHUNK => pool.install(|| {
                use rayon::prelude::*;
                batch.par_chunks(CHUNK).map(eval_chunk).collect()
            }),
            _ => batch.chunks(CHUNK).map(eval_chunk).collect(),
        };
        let mut lls = Vec::with_capacity(batch.len());
        for (chunk_lls, g) in parts {
            lls.extend(chunk_lls);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let n_bad = lls.iter().filter(|v| !v.is_finite()).count();
        if n_bad > 0 {
            log::debug!("{n_bad} divergent per-observation log-likelihoods clamped");
        }
        clamp_divergent(&mut lls);
        scale * lls.iter().sum::<f64>()
    }

    /// Log prior of the flat vector including softplus log-Jacobians;
    /// gradient added into `grad`.
    fn log_prior(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        let l = &self.layout;
        let mut total = 0.0;
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        for (j, &sd) in self.prior_sd.iter().enumerate() {
            if sd > 0.0 {
                let z = u[j] / sd;
                total += -0.5 * z * z - sd.ln() - half_log_2pi;
                grad[j] -= u[j] / (sd * sd);
            }
        }
        if l.n_beta_local > 0 {
            let ni = self.spec.n_intervals();
            let p = self.spec.n_features;
            let width = ni * p;
            let mut rows = Vec::new();
            let mut beta = vec![0.0; width];
            let mut g_beta = vec![0.0; width];
            for (cell, kappa) in self.spec.beta_lattice.cells().enumerate() {
                l.beta.rows_unchecked(&kappa, &mut rows);
                let shifted: Vec<usize> = rows.iter().map(|r| r + l.beta_offset).collect();
                l.beta.assemble_from(u, &shifted, &mut beta);
                let local = l.beta_local_offset + cell * width;
                let global = l.beta_global_offset + cell;
                total += horseshoe_block(u, &beta, local, global, grad, &mut g_beta);
                for &r in &shifted {
                    for (slot, &g) in grad[r..r + width].iter_mut().zip(&g_beta) {
                        *slot += g;
                    }
                }
            }
        }
        if l.n_xi_scales > 0 {
            let xi = u[l.xi_offset..l.xi_offset + l.n_xi].to_vec();
            let mut g_xi = vec![0.0; l.n_xi];
            total += horseshoe_block(u, &xi, l.xi_local_offset, l.xi_global_offset, grad, &mut g_xi);
            for (slot, g) in grad[l.xi_offset..l.xi_offset + l.n_xi].iter_mut().zip(&g_xi) {
                *slot += g;
            }
        }
        total
    }

}

/// Horseshoe log density of `coef` with softplus-parameterized local scales
/// at `u[local..]` and global scale at `u[global]`, including the
/// log-Jacobians. Scale gradients go into `grad`, coefficient gradients are
/// written to `g_coef`.
fn horseshoe_block(
    u: &[f64],
    coef: &[f64],
    local: usize,
    global: usize,
    grad: &mut [f64],
    g_coef: &mut [f64],
) -> f64 {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let ut = u[global];
    let tau = softplus(ut);
    let mut total = half_cauchy_log_density(tau) + log_sigmoid(ut);
    let mut g_tau = -2.0 * tau / (1.0 + tau * tau);
    for (j, &b) in coef.iter().enumerate() {
        let ul = u[local + j];
        let lam = softplus(ul);
        let s = lam * tau;
        total += -0.5 * (b / s).powi(2) - s.ln() - half_log_2pi + half_cauchy_log_density(lam) + log_sigmoid(ul);
        g_coef[j] = -b / (s * s);
        let b2 = b * b / (s * s);
        let g_lam = (b2 - 1.0) / lam - 2.0 * lam / (1.0 + lam * lam);
        grad[local + j] += g_lam * sigmoid(ul) + sigmoid(-ul);
        g_tau += (b2 - 1.0) / tau;
    }
    grad[global] += g_tau * sigmoid(ut) + sigmoid(-ut);
    total
}

impl LogJoint for JointModel {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn n_rows(&self) -> usize {
        self.rows.len()
    }

    fn log_joint(&self, u: &[f64], batch: &[usize], scale: f64, grad: &mut [f64]) -> f64 {
        self.batch_log_lik(u, batch, scale, grad) + self.log_prior(u, grad)
    }
}

/// A model specification with its fitted variational posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub posterior: VariationalPosterior,
}

impl FittedModel {
    pub fn new(spec: ModelSpec, posterior: VariationalPosterior) -> Result<Self> {
        let layout = ModelLayout::new(&spec)?;
        if posterior.dim() != layout.dim {
            return Err(Error::Dimension {
                context: "posterior for model",
                expected: layout.dim,
                actual: posterior.dim(),
            });
        }
        Ok(Self { spec, posterior })
    }

    pub fn layout(&self) -> ModelLayout {
        ModelLayout::new(&self.spec).expect("validated at construction")
    }

    /// Plug-in parameters at the posterior mean.
    pub fn mean_parameters(&self) -> PemParameters<f64> {
        self.layout()
            .parameters(&self.spec, &self.posterior.mean)
            .expect("dimension checked at construction")
    }

    /// Seeded posterior draws of the coefficient groups.
    pub fn draw_parameters(&self, draws: usize, seed: u64) -> Vec<PemParameters<f64>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let layout = self.layout();
        self.posterior
            .sample_unconstrained(draws, &mut rng)
            .iter()
            .map(|u| layout.parameters(&self.spec, u).expect("dimension checked"))
            .collect()
    }

    pub fn save(&self, dir: &std::path::Path, stem: &str) -> Result<()> {
        self.posterior.save(dir, stem, &serde_json::to_value(&self.spec)?)
    }

    pub fn load(dir: &std::path::Path, stem: &str) -> Result<Self> {
        let (posterior, model) = VariationalPosterior::load(dir, stem)?;
        Self::new(serde_json::from_value(model)?, posterior)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quilt::LatticeSpec;

    fn small_spec(p: usize) -> ModelSpec {
        let lat = LatticeSpec::new(&[("mdc", 2), ("history", 2)], 2).unwrap();
        ModelSpec {
            n_features: p,
            feature_names: Vec::new(),
            breakpoints: Breakpoints::default(),
            alpha_lattice: lat.clone(),
            beta_lattice: LatticeSpec::new(&[("race", 2)], 1).unwrap(),
            gamma_lattice: lat.clone(),
            nu_lattice: lat,
            prior: PriorConfig::default(),
            use_probability_covariates: true,
            placement_slopes: true,
            horseshoe_beta: true,
        }
    }

    #[test]
    fn zero_covariates_leave_only_alpha() {
        let spec = small_spec(3);
        let mut params = PemParameters::<f64>::zeros(&spec).unwrap();
        params.alpha.values[1] = -3.0; // global component, interval 1
        params.alpha.values[4 + 1] = 0.5; // mdc = 0 component, interval 1
        params.beta.values.iter_mut().for_each(|v| *v = 0.7);
        params.gamma.values.iter_mut().for_each(|v| *v = 0.3);
        let c = CohortCoords::default();
        let lh = params.log_hazard(&c, &[0, 0, 0], &[0.0; 10], 1).unwrap();
        assert!((lh + 2.5).abs() < 1e-12);
    }

    #[test]
    fn single_bit_adds_its_coefficient() {
        let spec = small_spec(3);
        let mut params = PemParameters::<f64>::zeros(&spec).unwrap();
        let p = 3;
        // global β component, interval 2, feature 1
        params.beta.values[2 * p + 1] = 0.4;
        params.beta.values[2 * p + 2] = -0.1;
        let c = CohortCoords::default();
        let base = params.log_hazard(&c, &[0, 0, 0], &[0.0; 10], 2).unwrap();
        let one = params.log_hazard(&c, &[0, 1, 0], &[0.0; 10], 2).unwrap();
        let two = params.log_hazard(&c, &[0, 0, 1], &[0.0; 10], 2).unwrap();
        let both = params.log_hazard(&c, &[0, 1, 1], &[0.0; 10], 2).unwrap();
        assert!((one - base - 0.4).abs() < 1e-12);
        assert!(((both - base) - ((one - base) + (two - base))).abs() < 1e-12);
        assert!(params.log_hazard(&c, &[0, 1], &[0.0; 10], 2).is_err());
        assert!(params.log_hazard(&c, &[0, 1, 0], &[0.0; 9], 2).is_err());
    }

    #[test]
    fn layout_is_contiguous() {
        let spec = small_spec(4);
        let l = ModelLayout::new(&spec).unwrap();
        let blocks = l.blocks();
        let mut end = 0;
        for b in &blocks {
            assert_eq!(b.offset, end, "{}", b.name);
            end += b.len;
        }
        assert_eq!(end, l.dim);
    }

    fn random_episodes(n: usize, p: usize, seed: u64) -> Vec<EpisodeRecord> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| EpisodeRecord {
                episode_id: i as u64,
                person_id: format!("p{i}"),
                admit_date: 0,
                discharge_date: 1,
                placement: rng.gen_range(0..6),
                covariates: (0..p).map(|_| rng.gen_range(0..2)).collect(),
                cohort: CohortCoords {
                    mdc: rng.gen_range(0..2),
                    history_group: rng.gen_range(0..2),
                    cc_mcc: 0,
                    race: rng.gen_range(0..2),
                },
                wait_days: rng.gen_range(0.5..120.0),
                event: rng.gen_bool(0.5),
            })
            .collect()
    }

    #[test]
    fn log_joint_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        for probs in [true, false] {
            let mut spec = small_spec(3);
            spec.use_probability_covariates = probs;
            let model = JointModel::new(spec, &random_episodes(60, 3, 1)).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
            let u: Vec<f64> = (0..model.dim()).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let batch: Vec<usize> = (0..60).collect();
            let mut g = vec![0.0; model.dim()];
            model.log_joint(&u, &batch, 1.7, &mut g);
            let f = |v: &[f64]| model.log_joint(v, &batch, 1.7, &mut vec![0.0; v.len()]);
            for j in 0..model.dim() {
                let h = 1e-5;
                let mut up = u.clone();
                up[j] += h;
                let mut dn = u.clone();
                dn[j] -= h;
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-5 * (1.0 + fd.abs()), "j={j} fd={fd} g={}", g[j]);
            }
        }
    }

    #[test]
    fn threaded_evaluation_is_bitwise_identical() {
        let eps = random_episodes(3000, 3, 5);
        let single = JointModel::new(small_spec(3), &eps).unwrap();
        let multi = JointModel::with_threads(small_spec(3), &eps, 4).unwrap();
        let u = vec![0.05; single.dim()];
        let batch: Vec<usize> = (0..3000).rev().collect();
        let (mut g1, mut g2) = (vec![0.0; u.len()], vec![0.0; u.len()]);
        let a = single.log_joint(&u, &batch, 1.0, &mut g1);
        let b = multi.log_joint(&u, &batch, 1.0, &mut g2);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(g1, g2);
    }
}
