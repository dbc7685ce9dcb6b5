//! Synthetic episodes from a known generating model.
//!
//! Each row draws binary covariates and cohort coordinates, a latent
//! severity `s = w'x + σ_s·z`, a placement from the ordinal model with
//! logits shifted by `c·s` (`c` is the confounding strength), and a wait
//! time by inverting the piecewise exponential cumulative hazard. Waits past
//! the observation window are censored at the window.

use std::path::Path;

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{CohortCoords, EpisodeRecord};
use crate::model::{ModelLayout, ModelSpec, PemParameters, AXES};
use crate::placement::N_THRESHOLDS;
use crate::quilt::LatticeLayout;
use crate::scalar::sigmoid;
use crate::survival::{build_intervention_covariates, inverse_cumulative_hazard, Breakpoints};

/// `t = Λ⁻¹(−log(1 − u))` for `u ∈ (0, 1)`.
pub fn inverse_transform_wait(u: f64, hazards: &[f64], breakpoints: &Breakpoints<f64>) -> f64 {
    inverse_cumulative_hazard(-(-u).ln_1p(), hazards, breakpoints)
}

/// Scales for drawing a random ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruthScales {
    /// Global log-hazard per interval.
    pub log_hazard: Vec<f64>,
    /// Standard deviation of order-`o` α components is `alpha_sd·decay^(o-1)`.
    pub alpha_sd: f64,
    pub decay: f64,
    /// Fraction of non-zero feature effects.
    pub beta_density: f64,
    pub beta_sd: f64,
    pub gamma_prob_sd: f64,
    /// Raw (pre `−softplus`) indicator effect centre.
    pub gamma_indicator_raw: f64,
    pub gamma_sd: f64,
    /// Global ordered thresholds.
    pub thresholds: [f64; N_THRESHOLDS],
    pub nu_sd: f64,
    pub xi_sd: f64,
}

impl Default for TruthScales {
    fn default() -> Self {
        Self {
            log_hazard: vec![-4.0, -4.3, -4.6, -4.9],
            alpha_sd: 0.3,
            decay: 0.5,
            beta_density: 0.5,
            beta_sd: 0.3,
            gamma_prob_sd: 0.3,
            gamma_indicator_raw: -1.0,
            gamma_sd: 0.2,
            thresholds: [1.0, 0.0, -0.8, -1.6, -2.4],
            nu_sd: 0.2,
            xi_sd: 0.2,
        }
    }
}

/// Ground-truth coefficients in the flat unconstrained layout of
/// [`ModelLayout`] (scale entries unused) plus effective placement slopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParameters {
    pub coefficients: Vec<f64>,
    /// Placement slopes before severity tilting.
    pub xi: Vec<f64>,
}

impl TrueParameters {
    pub fn zeros(model: &ModelSpec) -> Result<Self> {
        let layout = ModelLayout::new(model)?;
        Ok(Self {
            coefficients: vec![0.0; layout.dim],
            xi: vec![0.0; model.n_features],
        })
    }

    /// Constant hazard `λ` in every interval and cohort, no other effects.
    pub fn constant_hazard(model: &ModelSpec, rate: f64) -> Result<Self> {
        let mut t = Self::zeros(model)?;
        let layout = ModelLayout::new(model)?;
        for i in 0..model.n_intervals() {
            t.coefficients[layout.alpha_offset + i] = rate.ln();
        }
        let thresholds = TruthScales::default().thresholds;
        set_global_thresholds(&mut t.coefficients[layout.nu_offset..], &thresholds);
        // Indicator effects of exactly zero need an infinitely negative raw
        // value; −40 gives −softplus(−40) ≈ −4e-18.
        for i in 0..model.n_intervals() {
            for k in N_THRESHOLDS..2 * N_THRESHOLDS {
                t.coefficients[layout.gamma_offset + i * 2 * N_THRESHOLDS + k] = -40.0;
            }
        }
        Ok(t)
    }

    pub fn random(model: &ModelSpec, scales: &TruthScales, seed: u64) -> Result<Self> {
        let layout = ModelLayout::new(model)?;
        let ni = model.n_intervals();
        let p = model.n_features;
        if scales.log_hazard.len() != ni {
            return Err(Error::Dimension {
                context: "truth log-hazards",
                expected: ni,
                actual: scales.log_hazard.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |sd: f64| -> f64 { sd * rng.sample::<f64, _>(StandardNormal) };
        let mut u = vec![0.0; layout.dim];
        let order_sd = |base: f64, o: usize| if o == 0 { 0.0 } else { base * scales.decay.powi(o as i32 - 1) };

        fill_components(&layout.alpha, &mut u[layout.alpha_offset..], |o, entry| {
            if o == 0 {
                scales.log_hazard[entry]
            } else {
                normal(order_sd(scales.alpha_sd, o))
            }
        });
        // β: a shared sparse support across intervals, global component only
        // plus small cohort deviations.
        let support: Vec<bool> = {
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            (0..p).map(|_| r.gen_bool(scales.beta_density.clamp(0.0, 1.0))).collect()
        };
        fill_components(&layout.beta, &mut u[layout.beta_offset..], |o, entry| {
            let j = entry % p.max(1);
            if !support[j] {
                0.0
            } else if o == 0 {
                normal(scales.beta_sd)
            } else {
                normal(order_sd(scales.beta_sd, o) * 0.5)
            }
        });
        let w = 2 * N_THRESHOLDS;
        fill_components(&layout.gamma, &mut u[layout.gamma_offset..], |o, entry| {
            let slot = entry % w;
            let sd = if slot < N_THRESHOLDS { scales.gamma_prob_sd } else { scales.gamma_sd };
            match (o, slot < N_THRESHOLDS) {
                (0, true) => normal(sd),
                (0, false) => scales.gamma_indicator_raw + normal(sd),
                _ => normal(order_sd(sd, o)),
            }
        });
        fill_components(&layout.nu, &mut u[layout.nu_offset..], |o, _| {
            if o == 0 {
                0.0
            } else {
                normal(order_sd(scales.nu_sd, o))
            }
        });
        set_global_thresholds(&mut u[layout.nu_offset..], &scales.thresholds);
        let xi = (0..p).map(|_| normal(scales.xi_sd)).collect();
        Ok(Self { coefficients: u, xi })
    }
}

/// Write the global ν component so that the transformed thresholds equal
/// `thresholds` when all other components vanish.
fn set_global_thresholds(nu: &mut [f64], thresholds: &[f64; N_THRESHOLDS]) {
    use crate::inference::Bijector;
    Bijector::OrderedThresholds.inverse(thresholds, &mut nu[..N_THRESHOLDS]);
}

fn fill_components(layout: &LatticeLayout, out: &mut [f64], mut f: impl FnMut(usize, usize) -> f64) {
    let w = layout.width;
    for c in &layout.components {
        let o = c.order();
        for e in 0..c.n_cells * w {
            out[c.offset + e] = f(o, e % w);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub model: ModelSpec,
    pub truth: TrueParameters,
    pub n: usize,
    /// Bernoulli rate of each covariate bit.
    pub feature_prob: f64,
    /// Severity loadings `w` (empty means zero).
    #[serde(default)]
    pub severity_weights: Vec<f64>,
    #[serde(default)]
    pub severity_sd: f64,
    /// Confounding strength `c`: severity's weight in the placement logit.
    #[serde(default)]
    pub confounding: f64,
    /// Severity's weight in every interval log-hazard.
    #[serde(default)]
    pub severity_hazard: f64,
    /// Observation window in days.
    pub censor_window: f64,
    /// Admission days are drawn uniformly from `[0, admit_span)`.
    #[serde(default = "default_span")]
    pub admit_span: i64,
    pub seed: u64,
}

fn default_span() -> i64 {
    730
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let layout = ModelLayout::new(&self.model)?;
        let p = self.model.n_features;
        if self.truth.coefficients.len() != layout.dim {
            return Err(Error::Dimension {
                context: "truth coefficients",
                expected: layout.dim,
                actual: self.truth.coefficients.len(),
            });
        }
        if self.truth.xi.len() != p {
            return Err(Error::Dimension {
                context: "truth placement slopes",
                expected: p,
                actual: self.truth.xi.len(),
            });
        }
        if !self.severity_weights.is_empty() && self.severity_weights.len() != p {
            return Err(Error::Dimension {
                context: "severity weights",
                expected: p,
                actual: self.severity_weights.len(),
            });
        }
        if self.truth.coefficients.iter().chain(&self.truth.xi).chain(&self.severity_weights).any(|v| !v.is_finite()) {
            return Err(Error::invalid("generating parameters must be finite"));
        }
        if !(0.0..=1.0).contains(&self.feature_prob) {
            return Err(Error::invalid("feature_prob must lie in [0, 1]"));
        }
        if !(self.censor_window > 0.0) || !self.severity_sd.is_finite() || self.severity_sd < 0.0 {
            return Err(Error::invalid("censor_window must be positive and severity_sd non-negative"));
        }
        if !self.confounding.is_finite() || !self.severity_hazard.is_finite() || self.admit_span <= 0 {
            return Err(Error::invalid("confounding, severity_hazard and admit_span must be finite/positive"));
        }
        Ok(())
    }

    /// Lattice extent per axis, consistent across all four lattices.
    fn axis_sizes(&self) -> Result<[usize; 4]> {
        let mut sizes = [1usize; 4];
        let m = &self.model;
        for lat in [&m.alpha_lattice, &m.beta_lattice, &m.gamma_lattice, &m.nu_lattice] {
            for d in &lat.dims {
                let a = AXES.iter().position(|x| *x == d.name).expect("validated axis");
                if sizes[a] != 1 && sizes[a] != d.size {
                    return Err(Error::invalid(format!("axis `{}` has inconsistent sizes", d.name)));
                }
                sizes[a] = d.size;
            }
        }
        Ok(sizes)
    }

    /// The x-conditional generating parameters: placement slopes include the
    /// severity tilt `c·w`.
    pub fn effective_parameters(&self) -> Result<PemParameters<f64>> {
        let layout = ModelLayout::new(&self.model)?;
        let mut params = layout.parameters(&self.model, &self.truth.coefficients)?;
        params.xi = self
            .truth
            .xi
            .iter()
            .enumerate()
            .map(|(j, &x)| x + self.confounding * self.severity_weights.get(j).copied().unwrap_or(0.0))
            .collect();
        Ok(params)
    }
}

/// Everything needed to score with, or compare against, the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthManifest {
    pub spec: GeneratorSpec,
    /// `c·w + ξ`.
    pub effective_xi: Vec<f64>,
    pub censored_fraction: f64,
    pub event_fraction: f64,
    pub placement_counts: [usize; N_THRESHOLDS + 1],
}

impl TruthManifest {
    pub fn parameters(&self) -> Result<PemParameters<f64>> {
        self.spec.effective_parameters()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub episodes: Vec<EpisodeRecord>,
    pub manifest: TruthManifest,
}

/// Draw the dataset. Row `n` uses its own stream of a seeded generator, so
/// the output does not depend on evaluation order.
pub fn generate(spec: &GeneratorSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let params = spec.effective_parameters()?;
    let sizes = spec.axis_sizes()?;
    let p = spec.model.n_features;
    let episodes: Vec<EpisodeRecord> = (0..spec.n)
        .into_par_iter()
        .map(|n| -> Result<EpisodeRecord> {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(n as u64);
            let x: Vec<u8> = (0..p).map(|_| u8::from(rng.gen_bool(spec.feature_prob))).collect();
            let cohort = CohortCoords {
                mdc: rng.gen_range(0..sizes[0]),
                history_group: rng.gen_range(0..sizes[1]),
                cc_mcc: rng.gen_range(0..sizes[2]),
                race: rng.gen_range(0..sizes[3]),
            };
            let observed_severity: f64 = spec
                .severity_weights
                .iter()
                .zip(&x)
                .filter(|(_, &b)| b == 1)
                .map(|(w, _)| w)
                .sum();
            let z: f64 = rng.sample(StandardNormal);
            let severity = observed_severity + spec.severity_sd * z;

            let exceed_x = params.exceedance(&cohort, &x)?;
            let latent_shift = spec.confounding * spec.severity_sd * z;
            let thresholds = params.thresholds(&cohort)?;
            let xi_shift: f64 = params.xi.iter().zip(&x).filter(|(_, &b)| b == 1).map(|(w, _)| w).sum();
            let u_place: f64 = rng.gen();
            let placement = thresholds
                .iter()
                .filter(|&&nu| u_place < sigmoid(nu + xi_shift + latent_shift))
                .count();
            let ivec = build_intervention_covariates(placement, &exceed_x)?;
            let mut log_h = params.log_hazards(&cohort, &x, &ivec)?;
            log_h.iter_mut().for_each(|h| *h += spec.severity_hazard * severity);
            let rates: Vec<f64> = log_h.iter().map(|h| h.exp()).collect();
            if rates.iter().any(|r| !r.is_finite()) {
                return Err(Error::invalid(format!("row {n}: generating hazard is not finite")));
            }
            let t = inverse_transform_wait(rng.sample(Open01), &rates, &params.breakpoints);
            let (wait_days, event) = if t > spec.censor_window {
                (spec.censor_window, false)
            } else {
                (t, true)
            };
            let admit_date = rng.gen_range(0..spec.admit_span);
            Ok(EpisodeRecord {
                episode_id: n as u64,
                person_id: format!("syn{n:07}"),
                admit_date,
                discharge_date: admit_date + rng.gen_range(1..15),
                placement: placement as u8,
                covariates: x,
                cohort,
                wait_days,
                event,
            })
        })
        .collect::<Result<_>>()?;
    let events = episodes.iter().filter(|e| e.event).count();
    let mut placement_counts = [0; N_THRESHOLDS + 1];
    for e in &episodes {
        placement_counts[e.placement as usize] += 1;
    }
    let denom = spec.n.max(1) as f64;
    Ok(SyntheticData {
        manifest: TruthManifest {
            effective_xi: params.xi.clone(),
            spec: spec.clone(),
            censored_fraction: (spec.n - events) as f64 / denom,
            event_fraction: events as f64 / denom,
            placement_counts,
        },
        episodes,
    })
}
