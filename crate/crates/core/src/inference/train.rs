//! Epoch loop: shuffled minibatches, Adam inside lookahead, plateau decay.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, Lookahead, PlateauSchedule};
use super::{minibatch_elbo, InitConfig, LogJoint, VariationalPosterior};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub param_sample_size: usize,
    pub initial_lr: f64,
    /// Fractional learning-rate reduction per non-improving epoch.
    pub lr_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub lookahead_sync: usize,
    pub lookahead_alpha: f64,
    pub seed: u64,
    pub init_mean: f64,
    pub init_log_sd: f64,
    /// Worker threads for likelihood evaluation.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10_000,
            param_sample_size: 8,
            initial_lr: 0.0015,
            lr_decay: 0.1,
            patience: 5,
            max_epochs: 100,
            lookahead_sync: 6,
            lookahead_alpha: 0.5,
            seed: 0,
            init_mean: 0.0,
            init_log_sd: 0.01f64.ln(),
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive_counts = [
            ("batch_size", self.batch_size),
            ("param_sample_size", self.param_sample_size),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
            ("lookahead_sync", self.lookahead_sync),
            ("threads", self.threads),
        ];
        if let Some((name, _)) = positive_counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::invalid("initial_lr must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::invalid("lr_decay must lie in (0, 1)"));
        }
        if !(self.lookahead_alpha > 0.0 && self.lookahead_alpha <= 1.0) {
            return Err(Error::invalid("lookahead_alpha must lie in (0, 1]"));
        }
        if !self.init_mean.is_finite() || !self.init_log_sd.is_finite() {
            return Err(Error::invalid("initialization must be finite"));
        }
        Ok(())
    }

    pub fn init(&self) -> InitConfig {
        InitConfig {
            mean: self.init_mean,
            log_sd: self.init_log_sd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate after this epoch's schedule update.
    pub lr: f64,
    pub stagnation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Posterior at the epoch with the lowest mean loss.
    pub posterior: VariationalPosterior,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
    pub skipped_steps: usize,
}

/// Fit `posterior` to `model`. Loss is the negative ELBO per observation.
pub fn train<M: LogJoint + ?Sized>(
    model: &M,
    mut posterior: VariationalPosterior,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = model.n_rows();
    if n == 0 {
        return Err(Error::invalid("no training rows"));
    }
    let d = posterior.dim();
    if model.dim() != d {
        return Err(Error::Dimension {
            context: "variational posterior",
            expected: model.dim(),
            actual: d,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut flat: Vec<f64> = posterior.mean.iter().chain(&posterior.log_sd).copied().collect();
    let mut adam = Adam::new(2 * d);
    let mut lookahead = Lookahead::new(&flat, config.lookahead_sync, config.lookahead_alpha);
    let mut schedule = PlateauSchedule::new(config.initial_lr, config.lr_decay, config.patience);
    let mut order: Vec<usize> = (0..n).collect();
    let batch_size = config.batch_size.min(n);
    let mut eps = vec![vec![0.0; d]; config.param_sample_size];
    let mut grad = vec![0.0; 2 * d];
    let mut best = posterior.clone();
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut skipped_steps = 0;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let lr = schedule.lr();
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        let mut had_nan = false;
        for batch in order.chunks(batch_size) {
            for e in eps.iter_mut().flatten() {
                *e = rng.sample(StandardNormal);
            }
            let (m, w) = flat.split_at(d);
            posterior.mean.copy_from_slice(m);
            posterior.log_sd.copy_from_slice(w);
            let est = minibatch_elbo(model, &posterior, batch, n, &eps)?;
            let loss = -est.value / n as f64;
            loss_sum += loss;
            n_batches += 1;
            for (g, v) in grad.iter_mut().zip(est.grad_mean.iter().chain(&est.grad_log_sd)) {
                *g = -v / n as f64;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                log::warn!("epoch {epoch}: non-finite gradient, step skipped");
                skipped_steps += 1;
                had_nan = true;
                continue;
            }
            adam.step(&mut flat, &grad, lr);
            lookahead.after_step(&mut flat);
        }
        let mean_loss = loss_sum / n_batches as f64;
        let decision = schedule.observe(mean_loss, had_nan);
        let (m, w) = flat.split_at(d);
        posterior.mean.copy_from_slice(m);
        posterior.log_sd.copy_from_slice(w);
        if decision.improved {
            best.clone_from(&posterior);
            best_epoch = epoch;
        }
        log::info!(
            "epoch {epoch}: loss {mean_loss:.6} lr {:.3e} stagnation {}",
            decision.lr,
            decision.stagnation
        );
        log.push(EpochLog {
            epoch,
            mean_loss,
            lr: decision.lr,
            stagnation: decision.stagnation,
        });
        if decision.stop {
            stop = StopReason::Patience;
            break;
        }
    }
    if best_epoch == 0 {
        // No epoch improved on +∞ (all skipped); keep the final state.
        best = posterior;
    }
    Ok(TrainOutcome {
        posterior: best,
        best_epoch,
        log,
        stop,
        skipped_steps,
    })
}

/// Write the epoch log as CSV to any writer.
pub fn write_log<W: Write>(logs: &[EpochLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for l in logs {
        w.serialize(l)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{Bijector, BlockDescriptor};
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// `y_i ~ N(μ, σ²)`, `μ ~ N(0, s²)`.
    struct Conjugate {
        y: Vec<f64>,
        sigma: f64,
        prior_sd: f64,
    }

    impl LogJoint for Conjugate {
        fn dim(&self) -> usize {
            1
        }
        fn n_rows(&self) -> usize {
            self.y.len()
        }
        fn log_joint(&self, u: &[f64], batch: &[usize], scale: f64, grad: &mut [f64]) -> f64 {
            let mu = u[0];
            let mut ll = 0.0;
            for &i in batch {
                let r = (self.y[i] - mu) / self.sigma;
                ll += -0.5 * r * r;
                grad[0] += scale * r / self.sigma;
            }
            grad[0] -= mu / (self.prior_sd * self.prior_sd);
            scale * ll - 0.5 * (mu / self.prior_sd).powi(2)
        }
    }

    fn one_block() -> Vec<BlockDescriptor> {
        vec![BlockDescriptor::new("mu", 0, 1, Bijector::Identity)]
    }

    #[test]
    fn conjugate_gaussian_recovers_analytic_posterior() {
        let y: Vec<f64> = (0..20).map(|i| 1.0 + ((i * 7) % 11) as f64 / 10.0 - 0.5).collect();
        let model = Conjugate { y: y.clone(), sigma: 1.0, prior_sd: 10.0 };
        let prec = y.len() as f64 + 1.0 / 100.0;
        let post_mean = y.iter().sum::<f64>() / prec;
        let post_sd = prec.sqrt().recip();

        let mut q = VariationalPosterior::new(one_block(), InitConfig::default()).unwrap();
        let mut adam = Adam::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let all: Vec<usize> = (0..y.len()).collect();
        let (mut m_avg, mut w_avg, mut k) = (0.0, 0.0, 0.0);
        for step in 0..6000 {
            let eps: Vec<Vec<f64>> = (0..16).map(|_| vec![rng.sample(StandardNormal)]).collect();
            let est = minibatch_elbo(&model, &q, &all, y.len(), &eps).unwrap();
            let mut flat = [q.mean[0], q.log_sd[0]];
            let lr = if step < 3000 { 0.02 } else { 0.002 };
            adam.step(&mut flat, &[-est.grad_mean[0], -est.grad_log_sd[0]], lr);
            q.mean[0] = flat[0];
            q.log_sd[0] = flat[1];
            if step >= 4000 {
                m_avg += flat[0];
                w_avg += flat[1];
                k += 1.0;
            }
        }
        assert!((m_avg / k - post_mean).abs() < 1e-2, "{} vs {post_mean}", m_avg / k);
        assert!(((w_avg / k).exp() - post_sd).abs() < 1e-2, "{} vs {post_sd}", (w_avg / k).exp());
    }

    /// Loss gets worse on every evaluation; zero gradient.
    struct Worsening(AtomicUsize);

    impl LogJoint for Worsening {
        fn dim(&self) -> usize {
            1
        }
        fn n_rows(&self) -> usize {
            10
        }
        fn log_joint(&self, _u: &[f64], _b: &[usize], _s: f64, _g: &mut [f64]) -> f64 {
            -(self.0.fetch_add(1, Ordering::SeqCst) as f64)
        }
    }

    #[test]
    fn rigged_loss_stops_after_patience() {
        let model = Worsening(AtomicUsize::new(0));
        let cfg = TrainConfig { batch_size: 10, param_sample_size: 1, ..TrainConfig::default() };
        let q = VariationalPosterior::new(one_block(), cfg.init()).unwrap();
        let out = train(&model, q, &cfg).unwrap();
        assert_eq!(out.log.len(), 6);
        assert_eq!(out.stop, StopReason::Patience);
        assert_eq!(out.best_epoch, 1);
        for l in &out.log {
            let expect = 0.0015 * 0.9f64.powi(l.epoch as i32 - 1);
            assert!((l.lr - expect).abs() < 1e-15);
        }
        assert!(out.log.windows(2).all(|w| w[1].lr <= w[0].lr));
    }

    #[test]
    fn deterministic_given_seed() {
        let y: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let model = Conjugate { y, sigma: 1.0, prior_sd: 5.0 };
        let cfg = TrainConfig { batch_size: 16, max_epochs: 7, seed: 4, initial_lr: 0.05, ..TrainConfig::default() };
        let run = || train(&model, VariationalPosterior::new(one_block(), cfg.init()).unwrap(), &cfg).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.posterior, b.posterior);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn config_validation_and_json() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { lr_decay: 1.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"batch_size": 64}"#).unwrap();
        assert_eq!(parsed.batch_size, 64);
        assert_eq!(parsed.initial_lr, 0.0015);
        let mut buf = Vec::new();
        write_log(&[EpochLog { epoch: 1, mean_loss: 2.5, lr: 0.001, stagnation: 0 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,mean_loss,lr,stagnation\n1,2.5,0.001,0\n");
    }
}
