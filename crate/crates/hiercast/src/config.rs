//! Pipeline configuration: one serializable struct covering generation,
//! binning, local fitting, inference, and evaluation, with validated
//! defaults that reproduce the reference study scale out of the box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hier::{Backend, SamplerConfig};
use crate::localfit::FitOptions;
use crate::synthgen::{GroundTruth, SimConfig, N_WEEKDAYS};
use crate::timegrid::DEFAULT_BIN_WIDTH;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthConfig {
    pub mu: f64,
    pub sigma_d: f64,
    pub sigma_j: f64,
    pub sigma_eps: f64,
    pub trend_scale: f64,
    pub curvature_scale: f64,
    pub minutes_open: u32,
    pub overdispersion: f64,
    pub mean_quantity: f64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        // About 147 expected arrivals over a 900-minute day at mu, with
        // group scales sized so the crossed structure explains roughly
        // two thirds of the c0 variance.
        TruthConfig {
            mu: (147.0f64 / 900.0).ln(),
            sigma_d: 0.15,
            sigma_j: 0.30,
            sigma_eps: 0.25,
            trend_scale: 0.02,
            curvature_scale: -0.10,
            minutes_open: 900,
            overdispersion: 0.05,
            mean_quantity: 1.3,
        }
    }
}

impl TruthConfig {
    /// Expand into generator parameters with effects drawn from the seed.
    pub fn ground_truth(&self, n_locations: usize, seed: u64) -> Result<GroundTruth> {
        let mut gt = GroundTruth {
            mu: self.mu,
            day_effects: vec![0.0; N_WEEKDAYS],
            location_effects: vec![0.0; n_locations],
            sigma_d: self.sigma_d,
            sigma_j: self.sigma_j,
            sigma_eps: self.sigma_eps,
            trend_scale: self.trend_scale,
            curvature_scale: self.curvature_scale,
            minutes_open: self.minutes_open,
            overdispersion: self.overdispersion,
            mean_quantity: self.mean_quantity,
        };
        gt.validate()?;
        gt.sample_effects(n_locations, seed);
        Ok(gt)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_locations: usize,
    pub n_days: usize,
    pub seed: u64,
    pub missing_day_fraction: f64,
    pub bin_width: u32,
    pub truth: TruthConfig,
    /// Log-shift used by the local fit.
    pub epsilon: f64,
    /// Minimum items on a day for its fit to enter the dataset.
    pub min_events: u64,
    pub backend: Backend,
    pub chains: usize,
    pub iterations: usize,
    pub warmup: Option<usize>,
    pub sigma_max: Option<f64>,
    /// Seed for the train/test coin flips (defaults to `seed`).
    pub split_seed: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_locations: 49,
            n_days: 180,
            seed: 20240101,
            missing_day_fraction: 0.0194,
            bin_width: DEFAULT_BIN_WIDTH,
            truth: TruthConfig::default(),
            epsilon: 1.0,
            min_events: 5,
            backend: Backend::Gibbs,
            chains: 4,
            iterations: 2000,
            warmup: None,
            sigma_max: None,
            split_seed: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        self.sim_config().validate().err_push(&mut problems);
        if self.bin_width == 0 {
            problems.push("bin_width must be >= 1".to_string());
        }
        if self.bin_width > self.truth.minutes_open {
            problems.push(format!(
                "bin_width ({}) exceeds minutes_open ({})",
                self.bin_width, self.truth.minutes_open
            ));
        }
        if !(self.epsilon > 0.0) {
            problems.push(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        self.truth
            .clone()
            .ground_truth(self.n_locations.max(1), 0)
            .err_push(&mut problems);
        self.sampler_config().validate().err_push(&mut problems);
        if let Some(s) = self.sigma_max {
            if !(s > 0.0) {
                problems.push(format!("sigma_max must be > 0, got {s}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            n_locations: self.n_locations,
            n_days: self.n_days,
            seed: self.seed,
            missing_day_fraction: self.missing_day_fraction,
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            epsilon: self.epsilon,
            min_events: self.min_events,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            backend: self.backend,
            chains: self.chains,
            iterations: self.iterations,
            warmup: self.warmup,
            seed: self.seed,
            sigma_max: self.sigma_max,
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

trait ErrPush {
    fn err_push(self, problems: &mut Vec<String>);
}

impl<T> ErrPush for Result<T> {
    fn err_push(self, problems: &mut Vec<String>) {
        if let Err(e) = self {
            problems.push(e.to_string());
        }
    }
}
