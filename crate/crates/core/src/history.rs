//! Sparse non-negative encoding of lagged history counts and median
//! bucketization into `2^K` history groups.
//!
//! Counts `X` (N × H) are reconstructed as `X̂ = (X·Eᵀ)·D` with a
//! non-negative encoder `E` (K × H) and a non-negative decoder `D` (K × H)
//! whose rows sum to one. The objective is the generalized KL (Poisson)
//! divergence plus an L1 penalty on the encoder:
//!
//! ```text
//! L(E, D) = Σ_nm [X_nm·log(X_nm / X̂_nm) − X_nm + X̂_nm] + λ·Σ_kh E_kh
//! ```
//!
//! Both blocks are fitted by majorize-minimize multiplicative updates, so
//! the objective never increases between outer iterations.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorizationConfig {
    pub latent_dim: usize,
    pub sparsity_weight: f64,
    pub max_iter: usize,
    /// Stop when the relative objective decrease falls below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FactorizationConfig {
    fn default() -> Self {
        Self {
            latent_dim: 5,
            sparsity_weight: 1.0,
            max_iter: 500,
            tolerance: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationModel {
    pub latent_dim: usize,
    pub history_dim: usize,
    /// Row-major `latent_dim × history_dim`.
    pub encoder: Vec<Vec<f64>>,
    pub decoder: Vec<Vec<f64>>,
    /// Objective after each outer iteration.
    pub loss_trace: Vec<f64>,
}

/// Dense row-major count matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CountMatrix {
    pub fn new(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let h = names.len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != h {
                return Err(Error::Dimension {
                    context: "history count row",
                    expected: h,
                    actual: r.len(),
                });
            }
            if r.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::invalid(format!("history row {i}: counts must be finite and non-negative")));
            }
        }
        Ok(Self { names, rows })
    }

    /// CSV with a header of count column names. A leading `episode_id`
    /// column, if present, is returned separately.
    pub fn read_csv(path: &Path) -> Result<(Option<Vec<u64>>, Self)> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let has_id = header.first().map(String::as_str) == Some("episode_id");
        let names = header[usize::from(has_id)..].to_vec();
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let mut fields = rec.iter();
            if has_id {
                let id = fields.next().unwrap_or_default();
                ids.push(id.parse().map_err(|_| Error::invalid(format!("row {i}: bad episode_id `{id}`")))?);
            }
            rows.push(
                fields
                    .map(|f| f.trim().parse::<f64>().map_err(|_| Error::invalid(format!("row {i}: bad count `{f}`"))))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok((has_id.then_some(ids), Self::new(names, rows)?))
    }

    pub fn history_dim(&self) -> usize {
        self.names.len()
    }
}

const FLOOR: f64 = 1e-300;

fn reconstruct(x: &[Vec<f64>], e: &[Vec<f64>], d: &[Vec<f64>], z: &mut [Vec<f64>], xhat: &mut [Vec<f64>]) {
    for ((xr, zr), hr) in x.iter().zip(z.iter_mut()).zip(xhat.iter_mut()) {
        for (zk, ek) in zr.iter_mut().zip(e) {
            *zk = xr.iter().zip(ek).map(|(a, b)| a * b).sum();
        }
        for (m, slot) in hr.iter_mut().enumerate() {
            *slot = zr.iter().zip(d).map(|(zk, dk)| zk * dk[m]).sum();
        }
    }
}

fn objective(x: &[Vec<f64>], xhat: &[Vec<f64>], e: &[Vec<f64>], lambda: f64) -> f64 {
    let mut total = 0.0;
    for (xr, hr) in x.iter().zip(xhat) {
        for (&a, &b) in xr.iter().zip(hr) {
            total += b - a;
            if a > 0.0 {
                total += a * (a / b.max(FLOOR)).ln();
            }
        }
    }
    total + lambda * e.iter().flatten().sum::<f64>()
}

/// Generalized KL divergence of the reconstruction, without the penalty.
pub fn reconstruction_error(counts: &CountMatrix, model: &FactorizationModel) -> f64 {
    let n = counts.rows.len();
    let mut z = vec![vec![0.0; model.latent_dim]; n];
    let mut xhat = vec![vec![0.0; model.history_dim]; n];
    reconstruct(&counts.rows, &model.encoder, &model.decoder, &mut z, &mut xhat);
    objective(&counts.rows, &xhat, &model.encoder, 0.0)
}

pub fn fit_factorization(counts: &CountMatrix, config: &FactorizationConfig) -> Result<FactorizationModel> {
    let k = config.latent_dim;
    let h = counts.history_dim();
    let x = &counts.rows;
    if k == 0 {
        return Err(Error::invalid("latent_dim must be at least 1"));
    }
    if !(config.sparsity_weight >= 0.0 && config.sparsity_weight.is_finite()) {
        return Err(Error::invalid("sparsity_weight must be finite and non-negative"));
    }
    let total: f64 = x.iter().flatten().sum();
    if x.is_empty() || h == 0 || total <= 0.0 {
        return Err(Error::invalid("history counts are all zero; factorization is degenerate"));
    }
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut d: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let row: Vec<f64> = (0..h).map(|_| rng.gen_range(0.5..1.5)).collect();
            let s: f64 = row.iter().sum();
            row.into_iter().map(|v| v / s).collect()
        })
        .collect();
    // Scale the encoder so that the initial reconstruction has the data's
    // total mass.
    let col_sums: Vec<f64> = (0..h).map(|m| x.iter().map(|r| r[m]).sum()).collect();
    let mut e: Vec<Vec<f64>> = (0..k).map(|_| (0..h).map(|_| rng.gen_range(0.5..1.5)).collect()).collect();
    let mass: f64 = e.iter().map(|ek| ek.iter().zip(&col_sums).map(|(a, b)| a * b).sum::<f64>()).sum();
    e.iter_mut().flatten().for_each(|v| *v *= total / mass);

    let mut z = vec![vec![0.0; k]; n];
    let mut xhat = vec![vec![0.0; h]; n];
    let mut ratio = vec![vec![0.0; h]; n];
    reconstruct(x, &e, &d, &mut z, &mut xhat);
    let mut trace = vec![objective(x, &xhat, &e, config.sparsity_weight)];
    for _ in 0..config.max_iter {
        // Encoder step.
        fill_ratio(x, &xhat, &mut ratio);
        let d_sums: Vec<f64> = d.iter().map(|dk| dk.iter().sum()).collect();
        for (kk, ek) in e.iter_mut().enumerate() {
            // Σ_m D_km·ratio_nm per row, then contract with X_nh.
            let rd: Vec<f64> = ratio.iter().map(|r| r.iter().zip(&d[kk]).map(|(a, b)| a * b).sum()).collect();
            for (hh, w) in ek.iter_mut().enumerate() {
                let num: f64 = x.iter().zip(&rd).map(|(xr, v)| xr[hh] * v).sum();
                let den = col_sums[hh] * d_sums[kk] + config.sparsity_weight;
                *w = if den > 0.0 { *w * num / den } else { 0.0 };
            }
        }
        reconstruct(x, &e, &d, &mut z, &mut xhat);
        // Decoder step on the simplex.
        fill_ratio(x, &xhat, &mut ratio);
        for (kk, dk) in d.iter_mut().enumerate() {
            for (m, v) in dk.iter_mut().enumerate() {
                *v *= z.iter().zip(&ratio).map(|(zr, r)| zr[kk] * r[m]).sum::<f64>();
            }
            let s: f64 = dk.iter().sum();
            if s > 0.0 {
                dk.iter_mut().for_each(|v| *v /= s);
            }
        }
        reconstruct(x, &e, &d, &mut z, &mut xhat);
        let obj = objective(x, &xhat, &e, config.sparsity_weight);
        let prev = *trace.last().expect("non-empty");
        trace.push(obj);
        if (prev - obj).abs() <= config.tolerance * prev.abs().max(1.0) {
            break;
        }
    }
    if let Some(k0) = e.iter().position(|ek| ek.iter().all(|&v| v <= 0.0)) {
        return Err(Error::Numerical(format!(
            "latent dimension {k0} lost all encoder weight; lower sparsity_weight or latent_dim"
        )));
    }
    Ok(FactorizationModel {
        latent_dim: k,
        history_dim: h,
        encoder: e,
        decoder: d,
        loss_trace: trace,
    })
}

fn fill_ratio(x: &[Vec<f64>], xhat: &[Vec<f64>], ratio: &mut [Vec<f64>]) {
    for ((xr, hr), rr) in x.iter().zip(xhat).zip(ratio.iter_mut()) {
        for ((&a, &b), r) in xr.iter().zip(hr).zip(rr.iter_mut()) {
            *r = if a > 0.0 { a / b.max(FLOOR) } else { 0.0 };
        }
    }
}

/// `z = E·x`.
pub fn encode_history(x: &[f64], model: &FactorizationModel) -> Result<Vec<f64>> {
    if x.len() != model.history_dim {
        return Err(Error::Dimension {
            context: "history vector",
            expected: model.history_dim,
            actual: x.len(),
        });
    }
    if x.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid("history counts must be non-negative"));
    }
    Ok(model
        .encoder
        .iter()
        .map(|ek| ek.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect())
}

/// Median cutoffs per latent dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryGroupRule {
    pub medians: Vec<f64>,
}

impl HistoryGroupRule {
    /// Medians of training encodings (mean of the two middle values for
    /// even counts).
    pub fn fit(encodings: &[Vec<f64>]) -> Result<Self> {
        let k = encodings.first().map(Vec::len).ok_or_else(|| Error::invalid("no encodings"))?;
        let medians = (0..k)
            .map(|d| {
                let mut col: Vec<f64> = encodings.iter().map(|z| z[d]).collect();
                col.sort_by(f64::total_cmp);
                let n = col.len();
                if n % 2 == 1 {
                    col[n / 2]
                } else {
                    0.5 * (col[n / 2 - 1] + col[n / 2])
                }
            })
            .collect();
        Ok(Self { medians })
    }

    pub fn n_groups(&self) -> usize {
        1 << self.medians.len()
    }

    /// Bit `d` is set iff `z_d > median_d`; dimension 0 is the least
    /// significant bit.
    pub fn assign(&self, z: &[f64]) -> usize {
        assign_group(z, &self.medians)
    }
}

pub fn assign_group(z: &[f64], medians: &[f64]) -> usize {
    z.iter()
        .zip(medians)
        .enumerate()
        .filter(|(_, (v, m))| v > m)
        .fold(0, |g, (d, _)| g | (1 << d))
}

/// Non-zero encoder weights of one latent dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityEntry {
    pub latent: usize,
    pub median: f64,
    /// `(feature, weight)` sorted by decreasing weight.
    pub weights: Vec<(String, f64)>,
}

/// Fitted encoder plus group rule, serialized as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEncoder {
    pub feature_names: Vec<String>,
    pub model: FactorizationModel,
    pub rule: HistoryGroupRule,
}

impl HistoryEncoder {
    pub fn fit(counts: &CountMatrix, config: &FactorizationConfig) -> Result<Self> {
        let model = fit_factorization(counts, config)?;
        let encodings = counts
            .rows
            .iter()
            .map(|r| encode_history(r, &model))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            feature_names: counts.names.clone(),
            rule: HistoryGroupRule::fit(&encodings)?,
            model,
        })
    }

    pub fn group(&self, x: &[f64]) -> Result<usize> {
        Ok(self.rule.assign(&encode_history(x, &self.model)?))
    }

    /// Encoder weights above `threshold` times the largest weight of their
    /// latent dimension, expressing each group bit as `Σ w_h x_h > median`.
    pub fn sparsity_report(&self, threshold: f64) -> Vec<SparsityEntry> {
        self.model
            .encoder
            .iter()
            .enumerate()
            .map(|(k, ek)| {
                let max = ek.iter().copied().fold(0.0, f64::max);
                let mut weights: Vec<(String, f64)> = ek
                    .iter()
                    .enumerate()
                    .filter(|(_, &w)| w > threshold * max && w > 0.0)
                    .map(|(h, &w)| (self.feature_names[h].clone(), w))
                    .collect();
                weights.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                SparsityEntry {
                    latent: k,
                    median: self.rule.medians[k],
                    weights,
                }
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let enc: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let m = &enc.model;
        if m.encoder.len() != m.latent_dim
            || m.encoder.iter().chain(&m.decoder).any(|r| r.len() != m.history_dim)
            || enc.rule.medians.len() != m.latent_dim
            || enc.feature_names.len() != m.history_dim
        {
            return Err(Error::invalid("history encoder file has inconsistent shapes"));
        }
        Ok(enc)
    }
}
