//! First-order optimizers and the plateau learning-rate schedule.

/// Adam on a flat parameter vector; `step` descends the given gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}

/// Lookahead: every `sync` inner steps the slow weights move a fraction
/// `alpha` towards the fast weights, and the fast weights are reset to them.
#[derive(Debug, Clone)]
pub struct Lookahead {
    pub sync: usize,
    pub alpha: f64,
    slow: Vec<f64>,
    count: usize,
}

impl Lookahead {
    pub fn new(initial: &[f64], sync: usize, alpha: f64) -> Self {
        Self {
            sync: sync.max(1),
            alpha,
            slow: initial.to_vec(),
            count: 0,
        }
    }

    /// Call after each inner optimizer step.
    pub fn after_step(&mut self, fast: &mut [f64]) -> bool {
        self.count += 1;
        if !self.count.is_multiple_of(self.sync) {
            return false;
        }
        for (s, f) in self.slow.iter_mut().zip(fast.iter_mut()) {
            *s += self.alpha * (*f - *s);
            *f = *s;
        }
        true
    }

    pub fn slow(&self) -> &[f64] {
        &self.slow
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleDecision {
    pub improved: bool,
    pub stop: bool,
    /// Learning rate for the next epoch.
    pub lr: f64,
    pub stagnation: usize,
}

/// Multiplicative decay on non-improving epochs with early stopping.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    decay: f64,
    patience: usize,
    best: f64,
    stagnation: usize,
}

impl PlateauSchedule {
    /// `decay` is the fractional reduction, so each stagnant epoch
    /// multiplies the rate by `1 − decay`.
    pub fn new(initial_lr: f64, decay: f64, patience: usize) -> Self {
        Self {
            lr: initial_lr,
            decay,
            patience,
            best: f64::INFINITY,
            stagnation: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Record an epoch loss. `force_stagnant` marks an epoch as
    /// non-improving regardless of its loss.
    pub fn observe(&mut self, loss: f64, force_stagnant: bool) -> ScheduleDecision {
        let improved = !force_stagnant && loss < self.best;
        if improved {
            self.best = loss;
            self.stagnation = 0;
        } else {
            self.lr *= 1.0 - self.decay;
            self.stagnation += 1;
        }
        ScheduleDecision {
            improved,
            stop: self.stagnation >= self.patience,
            lr: self.lr,
            stagnation: self.stagnation,
        }
    }
}
