//! Classification metrics, bootstrap uncertainty and posterior reports.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::EpisodeRecord;
use crate::model::{FittedModel, ModelSpec, PemParameters};
use crate::placement::N_THRESHOLDS;
use crate::quilt::LatticeLayout;
use crate::scalar::softplus;

/// Scores with binary labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Dimension {
                context: "scored set labels",
                expected: scores.len(),
                actual: labels.len(),
            });
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::invalid("scores contain NaN"));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Indices sorted by descending score.
    fn order_desc(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }
}

/// `P(score⁺ > score⁻) + ½·P(score⁺ = score⁻)` via midranks.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let n_pos = set.n_positive();
    let n_neg = set.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUROC needs both classes"));
    }
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && set.scores[idx[j + 1]] == set.scores[idx[i]] {
            j += 1;
        }
        // 1-based midrank of the tie block i..=j
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| set.labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Average precision: `Σ (R_t − R_{t−1})·P_t` over distinct score
/// thresholds in decreasing order, tied scores entering together.
pub fn auprc(set: &ScoredSet) -> Result<f64> {
    let n_pos = set.n_positive();
    if n_pos == 0 {
        return Err(Error::invalid("AUPRC needs at least one positive"));
    }
    let idx = set.order_desc();
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = set.scores[idx[i]];
        let before = tp;
        while i < idx.len() && set.scores[idx[i]] == s {
            tp += usize::from(set.labels[idx[i]]);
            seen += 1;
            i += 1;
        }
        if tp > before {
            ap += (tp - before) as f64 * (tp as f64 / seen as f64);
        }
    }
    Ok(ap / n_pos as f64)
}

/// Redraw limit for single-class bootstrap resamples, per resample.
pub const MAX_REDRAWS: usize = 1000;

/// Standard deviation of `metric` over `resamples` row bootstraps. Resample
/// `r` uses its own stream of a generator seeded with `seed`.
pub fn bootstrap_sd<F>(set: &ScoredSet, metric: F, resamples: usize, seed: u64) -> Result<f64>
where
    F: Fn(&ScoredSet) -> Result<f64> + Sync,
{
    if resamples < 100 {
        return Err(Error::invalid("bootstrap needs at least 100 resamples"));
    }
    if set.is_empty() {
        return Err(Error::invalid("bootstrap of an empty set"));
    }
    let n = set.len();
    let values = (0..resamples)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut idx = vec![0usize; n];
            for _ in 0..MAX_REDRAWS {
                idx.iter_mut().for_each(|i| *i = rng.gen_range(0..n));
                let sample = set.subset(&idx);
                let pos = sample.n_positive();
                if pos > 0 && pos < n {
                    return metric(&sample);
                }
            }
            Err(Error::invalid(format!(
                "bootstrap resample {r}: {MAX_REDRAWS} consecutive single-class draws"
            )))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = values.iter().sum::<f64>() / resamples as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (resamples - 1) as f64;
    Ok(var.sqrt())
}

/// Binary labels at a horizon: 1 iff the event happens by day `d`;
/// episodes censored before `d` are excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonLabels {
    pub horizon: f64,
    /// Indices of included episodes.
    pub included: Vec<usize>,
    pub labels: Vec<bool>,
    pub excluded: usize,
}

pub fn horizon_labels(outcomes: &[(f64, bool)], horizon: f64) -> HorizonLabels {
    let mut out = HorizonLabels {
        horizon,
        included: Vec::new(),
        labels: Vec::new(),
        excluded: 0,
    };
    for (i, &(t, event)) in outcomes.iter().enumerate() {
        if !event && t < horizon {
            out.excluded += 1;
            continue;
        }
        out.included.push(i);
        out.labels.push(event && t <= horizon);
    }
    out
}

/// Event probabilities by each horizon, plus per-interval log-hazards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub episode_id: u64,
    pub probabilities: Vec<f64>,
    pub log_hazards: Vec<f64>,
}

/// Plug-in predictions under fixed parameters, using each episode's
/// observed placement in the intervention covariates.
pub fn predict(params: &PemParameters<f64>, episodes: &[EpisodeRecord], horizons: &[f64]) -> Result<Vec<Prediction>> {
    episodes
        .par_iter()
        .map(|e| {
            let ivec = params.intervention_vector(&e.cohort, &e.covariates, e.placement as usize)?;
            let log_hazards = params.log_hazards(&e.cohort, &e.covariates, &ivec)?;
            let probabilities = horizons
                .iter()
                .map(|&h| crate::survival::event_probability(&log_hazards, &params.breakpoints, h))
                .collect();
            Ok(Prediction {
                episode_id: e.episode_id,
                probabilities,
                log_hazards,
            })
        })
        .collect()
}

pub fn write_predictions<W: Write>(preds: &[Prediction], horizons: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n_int = preds.first().map_or(0, |p| p.log_hazards.len());
    let mut header = vec!["episode_id".to_string()];
    header.extend(horizons.iter().map(|h| format!("p{h}")));
    header.extend((0..n_int).map(|i| format!("log_hazard_{i}")));
    w.write_record(&header)?;
    for p in preds {
        let mut row = vec![p.episode_id.to_string()];
        row.extend(p.probabilities.iter().chain(&p.log_hazards).map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_predictions`]: the horizons named in the header and
/// the rows.
pub fn read_predictions<R: std::io::Read>(input: R) -> Result<(Vec<f64>, Vec<Prediction>)> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("episode_id") {
        return Err(Error::invalid("predictions must start with an episode_id column"));
    }
    let mut horizons = Vec::new();
    let mut n_int = 0;
    for name in header.iter().skip(1) {
        if let Some(h) = name.strip_prefix('p') {
            if n_int > 0 {
                return Err(Error::invalid("horizon columns must precede log-hazard columns"));
            }
            horizons.push(h.parse::<f64>().map_err(|_| Error::invalid(format!("bad horizon column `{name}`")))?);
        } else if name.starts_with("log_hazard_") {
            n_int += 1;
        } else {
            return Err(Error::invalid(format!("unexpected predictions column `{name}`")));
        }
    }
    let mut preds = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .parse()
                .map_err(|_| Error::invalid(format!("predictions row {row}: `{}` is not a number", &rec[j])))
        };
        let episode_id = rec[0]
            .parse()
            .map_err(|_| Error::invalid(format!("predictions row {row}: bad episode_id `{}`", &rec[0])))?;
        let probabilities = (1..=horizons.len()).map(num).collect::<Result<_>>()?;
        let log_hazards = (1 + horizons.len()..1 + horizons.len() + n_int).map(num).collect::<Result<_>>()?;
        preds.push(Prediction { episode_id, probabilities, log_hazards });
    }
    Ok((horizons, preds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: f64,
    pub n: usize,
    pub excluded: usize,
    pub prevalence: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub auroc_sd: f64,
    pub auprc_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub horizons: Vec<HorizonMetrics>,
}

/// Metrics per horizon for predictions aligned with `episodes`.
pub fn evaluate(
    episodes: &[EpisodeRecord],
    preds: &[Prediction],
    horizons: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<MetricReport> {
    if preds.len() != episodes.len() {
        return Err(Error::Dimension {
            context: "predictions",
            expected: episodes.len(),
            actual: preds.len(),
        });
    }
    let outcomes: Vec<(f64, bool)> = episodes.iter().map(|e| (e.wait_days, e.event)).collect();
    let mut out = Vec::new();
    for (h_idx, &h) in horizons.iter().enumerate() {
        let hl = horizon_labels(&outcomes, h);
        let scores = hl.included.iter().map(|&i| preds[i].probabilities[h_idx]).collect();
        let set = ScoredSet::new(scores, hl.labels)?;
        out.push(HorizonMetrics {
            horizon: h,
            n: set.len(),
            excluded: hl.excluded,
            prevalence: set.n_positive() as f64 / set.len().max(1) as f64,
            auroc: auroc(&set)?,
            auprc: auprc(&set)?,
            auroc_sd: bootstrap_sd(&set, auroc, resamples, seed)?,
            auprc_sd: bootstrap_sd(&set, auprc, resamples, seed)?,
        });
    }
    Ok(MetricReport { horizons: out })
}

/// Posterior summaries use this many Monte Carlo draws by default.
pub const DEFAULT_DRAWS: usize = 200;

/// Per-cell posterior mean and sd of the five placement indicator effects
/// and their cumulative sums, for every interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEffectSummary {
    pub dims: Vec<String>,
    pub cells: Vec<Vec<usize>>,
    pub n_intervals: usize,
    /// `[cell][interval][k]`.
    pub mean: Vec<Vec<[f64; N_THRESHOLDS]>>,
    pub sd: Vec<Vec<[f64; N_THRESHOLDS]>>,
    /// Mean effect of placement `k+1` relative to home, `Σ_{j≤k} γ_j`.
    pub cumulative_mean: Vec<Vec<[f64; N_THRESHOLDS]>>,
    pub cumulative_sd: Vec<Vec<[f64; N_THRESHOLDS]>>,
}

/// Running mean/variance accumulator.
#[derive(Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn sd(&self) -> f64 {
        if self.n > 1.0 {
            (self.m2 / (self.n - 1.0)).sqrt().max(0.0)
        } else {
            0.0
        }
    }
}

pub fn cohort_effect_summary(fitted: &FittedModel, draws: usize, seed: u64) -> Result<CohortEffectSummary> {
    if draws == 0 {
        return Err(Error::invalid("need at least one posterior draw"));
    }
    let spec = &fitted.spec;
    let lattice = &spec.gamma_lattice;
    let ni = spec.n_intervals();
    let cells: Vec<Vec<usize>> = lattice.cells().collect();
    let samples = fitted.draw_parameters(draws, seed);
    let w = 2 * N_THRESHOLDS;
    let per_cell: Vec<_> = cells
        .par_iter()
        .map(|kappa| {
            let mut ind = vec![[Moments::default(); N_THRESHOLDS]; ni];
            let mut cum = vec![[Moments::default(); N_THRESHOLDS]; ni];
            for p in &samples {
                let raw = p.gamma.assemble(kappa).expect("lattice cell");
                for i in 0..ni {
                    let mut running = 0.0;
                    for k in 0..N_THRESHOLDS {
                        let g = -softplus(raw[i * w + N_THRESHOLDS + k]);
                        running += g;
                        ind[i][k].push(g);
                        cum[i][k].push(running);
                    }
                }
            }
            let pick = |m: &Vec<[Moments; N_THRESHOLDS]>, f: fn(&Moments) -> f64| {
                m.iter().map(|row| row.map(|x| f(&x))).collect::<Vec<_>>()
            };
            (
                pick(&ind, |m| m.mean),
                pick(&ind, Moments::sd),
                pick(&cum, |m| m.mean),
                pick(&cum, Moments::sd),
            )
        })
        .collect();
    let mut s = CohortEffectSummary {
        dims: lattice.dims.iter().map(|d| d.name.clone()).collect(),
        cells,
        n_intervals: ni,
        mean: Vec::new(),
        sd: Vec::new(),
        cumulative_mean: Vec::new(),
        cumulative_sd: Vec::new(),
    };
    for (m, sd, cm, csd) in per_cell {
        s.mean.push(m);
        s.sd.push(sd);
        s.cumulative_mean.push(cm);
        s.cumulative_sd.push(csd);
    }
    Ok(s)
}

impl CohortEffectSummary {
    /// One row per cohort cell; `(mean, sd)` column pairs for every
    /// interval and placement indicator.
    pub fn write_wide_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.dims.clone();
        for i in 0..self.n_intervals {
            for k in 0..N_THRESHOLDS {
                header.push(format!("interval{i}_placement{}_mean", k + 1));
                header.push(format!("interval{i}_placement{}_sd", k + 1));
            }
        }
        w.write_record(&header)?;
        for (c, kappa) in self.cells.iter().enumerate() {
            let mut row: Vec<String> = kappa.iter().map(usize::to_string).collect();
            for i in 0..self.n_intervals {
                for k in 0..N_THRESHOLDS {
                    row.push(self.mean[c][i][k].to_string());
                    row.push(self.sd[c][i][k].to_string());
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long (heatmap-ready) format with cumulative effects.
    pub fn write_long_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.dims.clone();
        header.extend(
            ["interval", "placement", "mean", "sd", "cumulative_mean", "cumulative_sd"].map(String::from),
        );
        w.write_record(&header)?;
        for (c, kappa) in self.cells.iter().enumerate() {
            for i in 0..self.n_intervals {
                for k in 0..N_THRESHOLDS {
                    let mut row: Vec<String> = kappa.iter().map(usize::to_string).collect();
                    row.push(i.to_string());
                    row.push((k + 1).to_string());
                    for v in [
                        self.mean[c][i][k],
                        self.sd[c][i][k],
                        self.cumulative_mean[c][i][k],
                        self.cumulative_sd[c][i][k],
                    ] {
                        row.push(v.to_string());
                    }
                    w.write_record(&row)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Posterior mean and sd of an assembled identity-bijector decomposition,
/// exact under the mean-field family.
fn assembled_moments(layout: &LatticeLayout, offset: usize, fitted: &FittedModel, kappa: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<usize> = layout.rows(kappa).expect("lattice cell").iter().map(|r| r + offset).collect();
    let mut mean = vec![0.0; layout.width];
    layout.assemble_from(&fitted.posterior.mean, &rows, &mut mean);
    let var: Vec<f64> = fitted.posterior.log_sd.iter().map(|w| (2.0 * w).exp()).collect();
    let mut v = vec![0.0; layout.width];
    layout.assemble_from(&var, &rows, &mut v);
    (mean, v.into_iter().map(f64::sqrt).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub cell: Vec<usize>,
    pub interval: usize,
    pub mean: f64,
    pub sd: f64,
}

/// Posterior mean and sd of the assembled baseline log-hazard per cohort
/// cell and interval.
pub fn baseline_hazard_report(fitted: &FittedModel) -> Vec<BaselineRow> {
    let layout = fitted.layout();
    let mut rows = Vec::new();
    for kappa in fitted.spec.alpha_lattice.cells() {
        let (mean, sd) = assembled_moments(&layout.alpha, layout.alpha_offset, fitted, &kappa);
        for i in 0..mean.len() {
            rows.push(BaselineRow {
                cell: kappa.clone(),
                interval: i,
                mean: mean[i],
                sd: sd[i],
            });
        }
    }
    rows
}

pub fn write_baseline_csv<W: Write>(spec: &ModelSpec, rows: &[BaselineRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = spec.alpha_lattice.dims.iter().map(|d| d.name.clone()).collect();
    header.extend(["interval", "mean", "sd"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut row: Vec<String> = r.cell.iter().map(usize::to_string).collect();
        row.extend([r.interval.to_string(), r.mean.to_string(), r.sd.to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub feature: String,
    pub mean: f64,
    pub sd: f64,
}

/// The `k` features with the largest `|posterior mean β|` in one interval
/// and β-lattice cell; ties broken by feature name.
pub fn top_coefficients(fitted: &FittedModel, beta_cell: &[usize], interval: usize, k: usize) -> Result<Vec<Coefficient>> {
    let spec = &fitted.spec;
    if interval >= spec.n_intervals() {
        return Err(Error::OutOfBounds {
            axis: "interval".into(),
            index: interval,
            size: spec.n_intervals(),
        });
    }
    spec.beta_lattice.check_index(beta_cell)?;
    let layout = fitted.layout();
    let (mean, sd) = assembled_moments(&layout.beta, layout.beta_offset, fitted, beta_cell);
    let p = spec.n_features;
    let mut coefs: Vec<Coefficient> = (0..p)
        .map(|j| Coefficient {
            feature: spec.feature_name(j),
            mean: mean[interval * p + j],
            sd: sd[interval * p + j],
        })
        .collect();
    coefs.sort_by(|a, b| b.mean.abs().total_cmp(&a.mean.abs()).then_with(|| a.feature.cmp(&b.feature)));
    coefs.truncate(k);
    Ok(coefs)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{InitConfig, VariationalPosterior};
    use crate::model::{ModelLayout, PriorConfig};
    use crate::quilt::LatticeSpec;
    use crate::survival::Breakpoints;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn set(scores: &[f64], labels: &[u8]) -> ScoredSet {
        ScoredSet::new(scores.to_vec(), labels.iter().map(|&l| l == 1).collect()).unwrap()
    }

    /// All positive/negative pairs, ties ½.
    fn brute_auroc(s: &ScoredSet) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s.labels[i] && !s.labels[j] {
                    den += 1.0;
                    num += if s.scores[i] > s.scores[j] {
                        1.0
                    } else if s.scores[i] == s.scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    /// Sweep every distinct threshold, counting directly.
    fn brute_auprc(s: &ScoredSet) -> f64 {
        let mut thresholds: Vec<f64> = s.scores.clone();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let pos = s.n_positive() as f64;
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for t in thresholds {
            let sel: Vec<usize> = (0..s.len()).filter(|&i| s.scores[i] >= t).collect();
            let tp = sel.iter().filter(|&&i| s.labels[i]).count() as f64;
            let recall = tp / pos;
            ap += (recall - prev_recall) * tp / sel.len() as f64;
            prev_recall = recall;
        }
        ap
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(auroc(&set(&[0.5; 4], &[0, 1, 0, 1])).unwrap(), 0.5);
        let s = set(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]);
        assert_eq!(auroc(&s).unwrap(), brute_auroc(&s));
        assert_eq!(auroc(&s).unwrap(), 0.75);
        assert!(auroc(&set(&[0.1, 0.2], &[1, 1])).is_err());
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&set(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0])).unwrap(), 1.0);
        let s = set(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]);
        assert!((auprc(&s).unwrap() - brute_auprc(&s)).abs() < 1e-15);
        assert!((auprc(&s).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        // A negative tied with the lowest positive prevents a perfect score.
        assert!(auprc(&set(&[0.9, 0.5, 0.5], &[1, 1, 0])).unwrap() < 1.0);
        assert!(auprc(&set(&[0.1, 0.2], &[0, 0])).is_err());
    }

    #[test]
    fn auprc_random_scores_near_prevalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let s = ScoredSet::new(scores, labels).unwrap();
        let prev = s.n_positive() as f64 / n as f64;
        assert!((auprc(&s).unwrap() - prev).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force(
            data in (4usize..=8).prop_flat_map(|n| (
                prop::collection::vec(0u8..4, n),
                prop::collection::vec(0u8..2, n),
            ))
        ) {
            let (raw, labels) = data;
            let scores: Vec<f64> = raw.iter().map(|&v| v as f64 / 4.0).collect();
            let s = set(&scores, &labels);
            let pos = s.n_positive();
            if pos > 0 {
                prop_assert!((auprc(&s).unwrap() - brute_auprc(&s)).abs() < 1e-12);
            }
            if pos > 0 && pos < s.len() {
                prop_assert!((auroc(&s).unwrap() - brute_auroc(&s)).abs() < 1e-12);
            }
        }

        #[test]
        fn auroc_monotone_invariant(scores in prop::collection::vec(-5.0f64..5.0, 6..30), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<bool> = scores.iter().map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let a = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
            let b = ScoredSet::new(scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect(), labels).unwrap();
            prop_assert_eq!(auroc(&a).unwrap(), auroc(&b).unwrap());
        }

        #[test]
        fn perfect_auprc_iff_separated(scores in prop::collection::vec(0u8..6, 3..10), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<bool> = scores.iter().map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            let s = ScoredSet::new(scores.iter().map(|&v| v as f64).collect(), labels).unwrap();
            let min_pos = (0..s.len()).filter(|&i| s.labels[i]).map(|i| s.scores[i]).fold(f64::INFINITY, f64::min);
            let max_neg = (0..s.len()).filter(|&i| !s.labels[i]).map(|i| s.scores[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(auprc(&s).unwrap() == 1.0, min_pos > max_neg);
        }
    }

    #[test]
    fn bootstrap_behaviour() {
        let n = 400;
        let separated = ScoredSet::new((0..n).map(|i| i as f64).collect(), (0..n).map(|i| i >= n / 2).collect()).unwrap();
        assert_eq!(bootstrap_sd(&separated, auroc, 200, 1).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let scores: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l)) + rng.gen::<f64>() * 1.5).collect();
        let noisy = ScoredSet::new(scores, labels).unwrap();
        let a = bootstrap_sd(&noisy, auroc, 1000, 5).unwrap();
        let b = bootstrap_sd(&noisy, auroc, 2000, 6).unwrap();
        assert!((a - b).abs() / b < 0.2, "{a} {b}");
        assert_eq!(a, bootstrap_sd(&noisy, auroc, 1000, 5).unwrap());
        assert!(bootstrap_sd(&noisy, auroc, 50, 5).is_err());
        // Tiny set with one positive: many single-class resamples are redrawn.
        let tiny = set(&[0.1, 0.9, 0.3], &[0, 1, 0]);
        assert!(bootstrap_sd(&tiny, auroc, 100, 1).unwrap().is_finite());
        let single = set(&[0.1, 0.9], &[1, 1]);
        assert!(bootstrap_sd(&single, auroc, 100, 1).is_err());
    }

    #[test]
    fn horizon_label_rules() {
        let outcomes = [(10.0, true), (40.0, true), (20.0, false), (30.0, false), (35.0, false), (30.0, true)];
        let hl = horizon_labels(&outcomes, 30.0);
        assert_eq!(hl.excluded, 1);
        assert_eq!(hl.included, vec![0, 1, 3, 4, 5]);
        assert_eq!(hl.labels, vec![true, false, false, false, true]);
    }

    fn fitted(p: usize) -> FittedModel {
        let lat = LatticeSpec::new(&[("mdc", 2), ("history", 3)], 2).unwrap();
        let spec = ModelSpec {
            n_features: p,
            feature_names: (0..p).map(|j| format!("f{j}")).collect(),
            breakpoints: Breakpoints::default(),
            alpha_lattice: lat.clone(),
            beta_lattice: LatticeSpec::global(),
            gamma_lattice: lat.clone(),
            nu_lattice: lat,
            prior: PriorConfig::default(),
            use_probability_covariates: true,
            placement_slopes: false,
            horseshoe_beta: true,
        };
        let layout = ModelLayout::new(&spec).unwrap();
        let q = VariationalPosterior::new(layout.blocks(), InitConfig { mean: 0.0, log_sd: -1000.0 }).unwrap();
        FittedModel::new(spec, q).unwrap()
    }

    #[test]
    fn zero_posterior_effects() {
        let f = fitted(2);
        let s = cohort_effect_summary(&f, 20, 1).unwrap();
        assert_eq!(s.cells.len(), 6);
        let ln2 = std::f64::consts::LN_2;
        for c in 0..6 {
            for i in 0..4 {
                for k in 0..5 {
                    assert!((s.mean[c][i][k] + ln2).abs() < 1e-12);
                    assert_eq!(s.sd[c][i][k], 0.0);
                    assert!((s.cumulative_mean[c][i][k] + (k + 1) as f64 * ln2).abs() < 1e-12);
                }
            }
        }
        let mut buf = Vec::new();
        s.write_wide_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("mdc,history,interval0_placement1_mean,interval0_placement1_sd"));
    }

    #[test]
    fn baseline_report_matches_direct_assembly_and_mc() {
        let mut f = fitted(2);
        let layout = f.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for j in layout.alpha_offset..layout.alpha_offset + layout.alpha.len {
            f.posterior.mean[j] = rng.gen_range(-1.0..1.0);
            f.posterior.log_sd[j] = rng.gen_range(-2.0..-0.5);
        }
        let rows = baseline_hazard_report(&f);
        assert_eq!(rows.len(), 6 * 4);
        let params = f.mean_parameters();
        let draws = f.draw_parameters(4000, 9);
        for r in &rows {
            let direct = params.alpha.assemble(&r.cell).unwrap()[r.interval];
            assert!((r.mean - direct).abs() < 1e-12);
            let mc = draws.iter().map(|p| p.alpha.assemble(&r.cell).unwrap()[r.interval]).sum::<f64>() / 4000.0;
            assert!((mc - r.mean).abs() < 3.0 * r.sd / 4000f64.sqrt(), "{mc} vs {}", r.mean);
        }
    }

    #[test]
    fn top_coefficient_ranking() {
        let mut f = fitted(3);
        let layout = f.layout();
        let p = 3;
        // interval 1: f0 = 0.2, f1 = −0.9, f2 = 0.5
        for (j, v) in [0.2, -0.9, 0.5].into_iter().enumerate() {
            f.posterior.mean[layout.beta_offset + p + j] = v;
        }
        let top = top_coefficients(&f, &[], 1, 2).unwrap();
        assert_eq!(top.iter().map(|c| c.feature.as_str()).collect::<Vec<_>>(), ["f1", "f2"]);
        assert!(top_coefficients(&f, &[], 1, 0).unwrap().is_empty());
        let zeros = top_coefficients(&f, &[], 0, 10).unwrap();
        assert_eq!(zeros.iter().map(|c| c.feature.as_str()).collect::<Vec<_>>(), ["f0", "f1", "f2"]);
        assert!(top_coefficients(&f, &[], 4, 1).is_err());
    }

    #[test]
    fn predictions_csv_round_trip() {
        let preds = vec![
            Prediction { episode_id: 4, probabilities: vec![0.25, 0.5], log_hazards: vec![-3.0, -4.125] },
            Prediction { episode_id: 9, probabilities: vec![0.1, 0.3], log_hazards: vec![-2.0, -5.0] },
        ];
        let mut buf = Vec::new();
        write_predictions(&preds, &[30.0, 90.0], &mut buf).unwrap();
        let (h, back) = read_predictions(buf.as_slice()).unwrap();
        assert_eq!(h, vec![30.0, 90.0]);
        assert_eq!(back, preds);
        assert!(read_predictions("id,p30\n1,0.5\n".as_bytes()).is_err());
        assert!(read_predictions("episode_id,p30\n1,x\n".as_bytes()).is_err());
    }
}
