use std::path::Path;

use serde::Deserialize;

use quiltsurv::history::FactorizationConfig;
use quiltsurv::inference::TrainConfig;
use quiltsurv::model::ModelSpec;
use quiltsurv::quantize::DEFAULT_PERCENTILES;
use quiltsurv::synth::TruthScales;

use crate::CliError;

/// Settings for `simulate`.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    pub feature_prob: f64,
    pub censor_window: f64,
    pub confounding: f64,
    pub severity_sd: f64,
    pub severity_hazard: f64,
    pub severity_weights: Vec<f64>,
    pub admit_span: i64,
    pub truth: TruthScales,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            feature_prob: 0.3,
            censor_window: 90.0,
            confounding: 0.0,
            severity_sd: 0.0,
            severity_hazard: 0.0,
            severity_weights: Vec::new(),
            admit_span: 730,
            truth: TruthScales::default(),
        }
    }
}

/// One JSON document configuring every stage; flags override it.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model structure. When absent the standard cohort lattice is used
    /// with `n_features` taken from the data (or from `n_features`).
    pub model: Option<ModelSpec>,
    pub n_features: usize,
    pub train: TrainConfig,
    pub horizons: Vec<f64>,
    pub seed: u64,
    pub threads: usize,
    /// Start α and ν at pooled data estimates instead of zero.
    pub warm_start: bool,
    pub simulate: SimulateConfig,
    pub factorization: FactorizationConfig,
    pub percentiles: Vec<f64>,
    /// Monte Carlo draws for posterior summaries.
    pub draws: usize,
    pub bootstrap_resamples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            n_features: 20,
            train: TrainConfig::default(),
            horizons: vec![30.0, 90.0],
            seed: 0,
            threads: 1,
            warm_start: false,
            simulate: SimulateConfig::default(),
            factorization: FactorizationConfig::default(),
            percentiles: DEFAULT_PERCENTILES.to_vec(),
            draws: quiltsurv::evaluation::DEFAULT_DRAWS,
            bootstrap_resamples: 1000,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Model structure for data with `p` features.
    pub fn model_for(&self, p: usize) -> Result<ModelSpec, CliError> {
        match &self.model {
            Some(m) if m.n_features != p => Err(CliError::Data(format!(
                "configured model expects {} features but the data has {p}",
                m.n_features
            ))),
            Some(m) => Ok(m.clone()),
            None => Ok(ModelSpec::standard(p)),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.horizons.is_empty() || self.horizons.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(CliError::Usage("horizons must be positive and finite".into()));
        }
        if self.threads == 0 {
            return Err(CliError::Usage("threads must be at least 1".into()));
        }
        Ok(())
    }
}
