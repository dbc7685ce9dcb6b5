//! Mean-field variational inference over unconstrained parameters.
//!
//! The variational family is a diagonal Gaussian `q(u) = Π N(u_j | m_j, e^{2ω_j})`
//! over an unconstrained vector `u`. Constrained parameters are obtained by
//! pushing `u` through per-block [`Bijector`]s. The ELBO is estimated with
//! reparameterized draws `u = m + e^ω ⊙ ε`:
//!
//! ```text
//! ELBO ≈ (1/S) Σ_s [ (N/|B|)·Σ_{n∈B} ℓ_n(u_s) + log p(u_s) ] + H[q]
//! ```
//!
//! where `log p(u)` already includes the bijector log-Jacobians and
//! per-observation log-likelihoods `ℓ_n` are passed through
//! [`clamp_divergent`].

mod optim;
mod train;

pub use optim::{Adam, Lookahead, PlateauSchedule, ScheduleDecision};
pub use train::{train, write_log, EpochLog, StopReason, TrainConfig, TrainOutcome};

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::placement::{threshold_transform, N_THRESHOLDS};
use crate::scalar::{log_sigmoid, softplus, softplus_inverse};

/// Offset applied below the smallest finite log-likelihood when replacing
/// divergent entries.
pub const CLAMP_OFFSET: f64 = 100.0;
/// Replacement value when no entry is finite.
pub const CLAMP_FALLBACK: f64 = -1e6;

/// Replace non-finite entries by `min(finite) − 100`, or by `−10⁶` if no
/// entry is finite. Finite entries are left untouched.
pub fn clamp_divergent(values: &mut [f64]) {
    let min_finite = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    let fill = if min_finite.is_finite() {
        min_finite - CLAMP_OFFSET
    } else {
        CLAMP_FALLBACK
    };
    for v in values.iter_mut().filter(|v| !v.is_finite()) {
        *v = fill;
    }
}

/// Map from unconstrained to constrained space for a parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bijector {
    Identity,
    /// `softplus(u) > 0`.
    Softplus,
    /// `−softplus(u) < 0`.
    NegatedSoftplus,
    /// Chunks of five mapped to descending ordinal thresholds.
    OrderedThresholds,
}

impl Bijector {
    pub fn forward(self, u: &[f64], out: &mut [f64]) {
        match self {
            Bijector::Identity => out.copy_from_slice(u),
            Bijector::Softplus => out.iter_mut().zip(u).for_each(|(o, &x)| *o = softplus(x)),
            Bijector::NegatedSoftplus => out.iter_mut().zip(u).for_each(|(o, &x)| *o = -softplus(x)),
            Bijector::OrderedThresholds => {
                for (o, x) in out.chunks_mut(N_THRESHOLDS).zip(u.chunks(N_THRESHOLDS)) {
                    o.copy_from_slice(&threshold_transform(x));
                }
            }
        }
    }

    pub fn inverse(self, y: &[f64], out: &mut [f64]) {
        match self {
            Bijector::Identity => out.copy_from_slice(y),
            Bijector::Softplus => out.iter_mut().zip(y).for_each(|(o, &v)| *o = softplus_inverse(v)),
            Bijector::NegatedSoftplus => out.iter_mut().zip(y).for_each(|(o, &v)| *o = softplus_inverse(-v)),
            Bijector::OrderedThresholds => {
                for (o, v) in out.chunks_mut(N_THRESHOLDS).zip(y.chunks(N_THRESHOLDS)) {
                    o[0] = v[0];
                    for k in 1..N_THRESHOLDS {
                        o[k] = softplus_inverse(v[k - 1] - v[k]);
                    }
                }
            }
        }
    }

    /// `log |det ∂forward/∂u|`.
    pub fn log_abs_det_jacobian(self, u: &[f64]) -> f64 {
        match self {
            Bijector::Identity => 0.0,
            Bijector::Softplus | Bijector::NegatedSoftplus => u.iter().map(|&x| log_sigmoid(x)).sum(),
            Bijector::OrderedThresholds => u
                .chunks(N_THRESHOLDS)
                .map(|c| c[1..].iter().map(|&x| log_sigmoid(x)).sum::<f64>())
                .sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDescriptor {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub bijector: Bijector,
}

impl BlockDescriptor {
    pub fn new(name: &str, offset: usize, len: usize, bijector: Bijector) -> Self {
        Self {
            name: name.to_string(),
            offset,
            len,
            bijector,
        }
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Unnormalized log density over a flat unconstrained vector, evaluated on
/// row subsets.
pub trait LogJoint: Sync {
    fn dim(&self) -> usize;

    fn n_rows(&self) -> usize;

    /// `scale · Σ_{n∈batch} ℓ_n(u) + log p(u)`, with the gradient with
    /// respect to `u` added into `grad`.
    fn log_joint(&self, u: &[f64], batch: &[usize], scale: f64, grad: &mut [f64]) -> f64;
}

/// Diagonal Gaussian over the unconstrained parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub mean: Vec<f64>,
    pub log_sd: Vec<f64>,
    pub blocks: Vec<BlockDescriptor>,
}

/// Posterior initialization. Softplus blocks start at `softplus(mean)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub mean: f64,
    pub log_sd: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            mean: 0.0,
            log_sd: 0.01f64.ln(),
        }
    }
}

impl VariationalPosterior {
    pub fn new(blocks: Vec<BlockDescriptor>, init: InitConfig) -> Result<Self> {
        let dim = blocks.iter().map(|b| b.offset + b.len).max().unwrap_or(0);
        let covered: usize = blocks.iter().map(|b| b.len).sum();
        if covered != dim {
            return Err(Error::invalid("variational blocks must tile the parameter vector"));
        }
        Ok(Self {
            mean: vec![init.mean; dim],
            log_sd: vec![init.log_sd; dim],
            blocks,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn block(&self, name: &str) -> Option<&BlockDescriptor> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// `m + e^ω ⊙ ε`.
    pub fn reparameterize(&self, eps: &[f64], out: &mut [f64]) {
        for ((o, (&m, &w)), &e) in out.iter_mut().zip(self.mean.iter().zip(&self.log_sd)).zip(eps) {
            *o = m + w.exp() * e;
        }
    }

    pub fn constrain(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        for b in &self.blocks {
            b.bijector.forward(&u[b.range()], &mut out[b.range()]);
        }
        out
    }

    /// `S` constrained draws.
    pub fn sample_parameters<R: Rng + ?Sized>(&self, draws: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let mut eps = vec![0.0; self.dim()];
        let mut u = vec![0.0; self.dim()];
        (0..draws)
            .map(|_| {
                eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
                self.reparameterize(&eps, &mut u);
                self.constrain(&u)
            })
            .collect()
    }

    /// Unconstrained draws (for models that apply their own transforms).
    pub fn sample_unconstrained<R: Rng + ?Sized>(&self, draws: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let mut eps = vec![0.0; self.dim()];
        (0..draws)
            .map(|_| {
                eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
                let mut u = vec![0.0; self.dim()];
                self.reparameterize(&eps, &mut u);
                u
            })
            .collect()
    }

    /// Gaussian entropy `Σ ω_j + d/2·(1 + log 2π)`.
    pub fn entropy(&self) -> f64 {
        let d = self.dim() as f64;
        self.log_sd.iter().sum::<f64>() + 0.5 * d * (1.0 + (2.0 * std::f64::consts::PI).ln())
    }

    /// Write `<stem>.json` (manifest) and `<stem>.bin` (mean, log-sd).
    pub fn save(&self, dir: &Path, stem: &str, model: &serde_json::Value) -> Result<()> {
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            dim: self.dim(),
            blocks: self.blocks.clone(),
            blob: format!("{stem}.bin"),
            model: model.clone(),
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        blob::write_arrays(&dir.join(&manifest.blob), &[&self.mean, &self.log_sd])
    }

    /// Load a checkpoint, returning the posterior and the model section of
    /// its manifest.
    pub fn load(dir: &Path, stem: &str) -> Result<(Self, serde_json::Value)> {
        let manifest: CheckpointManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        let mut arrays = blob::read_arrays(&dir.join(&manifest.blob))?.into_iter();
        let (mean, log_sd) = match (arrays.next(), arrays.next()) {
            (Some(m), Some(s)) if m.len() == manifest.dim && s.len() == manifest.dim => (m, s),
            _ => return Err(Error::invalid("checkpoint blob does not match manifest")),
        };
        Ok((
            Self {
                mean,
                log_sd,
                blocks: manifest.blocks,
            },
            manifest.model,
        ))
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    dim: usize,
    blocks: Vec<BlockDescriptor>,
    blob: String,
    model: serde_json::Value,
}

/// Monte Carlo ELBO and its gradient with respect to `(mean, log_sd)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    pub grad_mean: Vec<f64>,
    pub grad_log_sd: Vec<f64>,
}

/// ELBO estimate on a minibatch for fixed standard-normal draws `eps`
/// (one vector per parameter sample).
pub fn minibatch_elbo<M: LogJoint + ?Sized>(
    model: &M,
    posterior: &VariationalPosterior,
    batch: &[usize],
    n_total: usize,
    eps: &[Vec<f64>],
) -> Result<ElboEstimate> {
    if batch.is_empty() {
        return Err(Error::invalid("empty minibatch"));
    }
    if n_total < batch.len() {
        return Err(Error::invalid(format!(
            "total row count {n_total} is smaller than the batch ({})",
            batch.len()
        )));
    }
    if eps.is_empty() {
        return Err(Error::invalid("need at least one parameter draw"));
    }
    let d = posterior.dim();
    if model.dim() != d {
        return Err(Error::Dimension {
            context: "variational posterior",
            expected: model.dim(),
            actual: d,
        });
    }
    let scale = n_total as f64 / batch.len() as f64;
    let s_inv = 1.0 / eps.len() as f64;
    let mut grad_mean = vec![0.0; d];
    let mut grad_log_sd = vec![0.0; d];
    let mut u = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut total = 0.0;
    for (s, e) in eps.iter().enumerate() {
        posterior.reparameterize(e, &mut u);
        g.iter_mut().for_each(|v| *v = 0.0);
        let lj = model.log_joint(&u, batch, scale, &mut g);
        if !lj.is_finite() {
            let worst = u
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(j, v)| format!("largest |u| at {j}: {v}"))
                .unwrap_or_default();
            return Err(Error::Numerical(format!(
                "log joint is {lj} for parameter draw {s} after clamping ({worst})"
            )));
        }
        total += lj;
        for j in 0..d {
            grad_mean[j] += s_inv * g[j];
            grad_log_sd[j] += s_inv * g[j] * e[j] * posterior.log_sd[j].exp();
        }
    }
    grad_log_sd.iter_mut().for_each(|v| *v += 1.0);
    Ok(ElboEstimate {
        value: total * s_inv + posterior.entropy(),
        grad_mean,
        grad_log_sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clamp_contract() {
        let mut v = [-50.0, f64::NEG_INFINITY];
        clamp_divergent(&mut v);
        assert_eq!(v, [-50.0, -150.0]);
        let mut all = [f64::NEG_INFINITY, f64::NAN];
        clamp_divergent(&mut all);
        assert_eq!(all, [-1e6, -1e6]);
        let mut fine = [-1.0, -2.0, 3.0];
        clamp_divergent(&mut fine);
        assert_eq!(fine, [-1.0, -2.0, 3.0]);
    }

    #[test]
    fn clamp_idempotent_and_order_preserving() {
        let mut v = [-3.0, f64::NAN, -7.5, f64::NEG_INFINITY, 2.0];
        clamp_divergent(&mut v);
        let once = v;
        clamp_divergent(&mut v);
        assert_eq!(v, once);
        assert!(once[0] > once[2] && once[4] > once[0]);
        assert_eq!(once[1], -107.5);
    }

    fn blocks() -> Vec<BlockDescriptor> {
        vec![
            BlockDescriptor::new("a", 0, 3, Bijector::Identity),
            BlockDescriptor::new("s", 3, 2, Bijector::Softplus),
        ]
    }

    #[test]
    fn degenerate_posterior_returns_bijected_mean() {
        let mut q = VariationalPosterior::new(blocks(), InitConfig { mean: 0.3, log_sd: -800.0 }).unwrap();
        q.mean[3] = -1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for draw in q.sample_parameters(5, &mut rng) {
            assert_eq!(draw[..3], [0.3, 0.3, 0.3]);
            assert_eq!(draw[3], softplus(-1.0));
        }
    }

    #[test]
    fn softplus_draws_positive() {
        let q = VariationalPosterior::new(blocks(), InitConfig { mean: -5.0, log_sd: 1.5 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for draw in q.sample_parameters(20_000, &mut rng) {
            assert!(draw[3] > 0.0 && draw[4] > 0.0);
        }
    }

    #[test]
    fn identity_block_sample_mean_within_clt_band() {
        let q = VariationalPosterior::new(blocks(), InitConfig { mean: 1.25, log_sd: 0.4f64.ln() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = 400;
        let draws = q.sample_parameters(s, &mut rng);
        for j in 0..3 {
            let m = draws.iter().map(|d| d[j]).sum::<f64>() / s as f64;
            assert!((m - 1.25).abs() < 3.0 * 0.4 / (s as f64).sqrt(), "j={j} m={m}");
        }
    }

    #[test]
    fn bijector_inverse_and_jacobian() {
        let u = [0.3, -1.2, 2.0, 0.1, -0.5];
        for b in [Bijector::Identity, Bijector::Softplus, Bijector::NegatedSoftplus, Bijector::OrderedThresholds] {
            let mut y = [0.0; 5];
            b.forward(&u, &mut y);
            let mut back = [0.0; 5];
            b.inverse(&y, &mut back);
            for k in 0..5 {
                assert!((back[k] - u[k]).abs() < 1e-10, "{b:?}");
            }
        }
        // Ordered thresholds: lower-triangular Jacobian, numerically checked.
        let mut jac = [[0.0; 5]; 5];
        for c in 0..5 {
            let (mut up, mut dn) = (u, u);
            up[c] += 1e-6;
            dn[c] -= 1e-6;
            let (mut fu, mut fd) = ([0.0; 5], [0.0; 5]);
            Bijector::OrderedThresholds.forward(&up, &mut fu);
            Bijector::OrderedThresholds.forward(&dn, &mut fd);
            for r in 0..5 {
                jac[r][c] = (fu[r] - fd[r]) / 2e-6;
            }
        }
        let logdet: f64 = (0..5).map(|k| jac[k][k].abs().ln()).sum();
        assert!((logdet - Bijector::OrderedThresholds.log_abs_det_jacobian(&u)).abs() < 1e-6);
    }

    #[test]
    fn entropy_shifts_by_log_scale() {
        let mut q = VariationalPosterior::new(blocks(), InitConfig::default()).unwrap();
        let h0 = q.entropy();
        let c: f64 = 3.0;
        q.log_sd[..3].iter_mut().for_each(|w| *w += c.ln());
        assert!((q.entropy() - h0 - 3.0 * c.ln()).abs() < 1e-12);
    }

    struct Constant;
    impl LogJoint for Constant {
        fn dim(&self) -> usize {
            5
        }
        fn n_rows(&self) -> usize {
            10
        }
        fn log_joint(&self, _u: &[f64], batch: &[usize], scale: f64, _g: &mut [f64]) -> f64 {
            scale * batch.len() as f64
        }
    }

    #[test]
    fn minibatch_scaling() {
        let q = VariationalPosterior::new(blocks(), InitConfig::default()).unwrap();
        let eps = vec![vec![0.0; 5]];
        let full = minibatch_elbo(&Constant, &q, &[0, 1, 2, 3], 4, &eps).unwrap();
        assert!((full.value - q.entropy() - 4.0).abs() < 1e-12);
        let doubled = minibatch_elbo(&Constant, &q, &[0, 1, 2, 3], 8, &eps).unwrap();
        assert!((doubled.value - q.entropy() - 8.0).abs() < 1e-12);
        assert!(minibatch_elbo(&Constant, &q, &[], 4, &eps).is_err());
        assert!(minibatch_elbo(&Constant, &q, &[0, 1], 1, &eps).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut q = VariationalPosterior::new(blocks(), InitConfig::default()).unwrap();
        q.mean[2] = 4.5;
        let model = serde_json::json!({"kind": "toy"});
        q.save(dir.path(), "ckpt", &model).unwrap();
        let (back, m) = VariationalPosterior::load(dir.path(), "ckpt").unwrap();
        assert_eq!(back, q);
        assert_eq!(m, model);
    }
}
