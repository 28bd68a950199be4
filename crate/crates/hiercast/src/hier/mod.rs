//! Two-way crossed random-effects model and its MCMC engine.
//!
//! One observation per location-day coefficient:
//!
//! ```text
//! y_i ~ Normal(mu + z_d[d_i] + z_j[j_i], s_eps)
//! z_d = s_d * eta_d,  eta_d ~ Normal(0, 1)     (non-centered)
//! z_j = s_j * eta_j,  eta_j ~ Normal(0, 1)
//! ```
//!
//! mu and the three scales carry flat priors; the scales are bounded above
//! by a large configurable constant so the posterior is proper. The engine
//! is run once per coefficient class. Two backends are provided: a conjugate
//! Gibbs sampler and a random-walk Metropolis-within-Gibbs reference
//! implementation; agreement between them is itself a test.

mod diagnostics;
mod gibbs;
mod mwg;

pub use diagnostics::{bulk_ess, diagnostics, split_rhat, DiagnosticsReport, ParamDiag};

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Observations for one coefficient class, indexed into the two groupings.
#[derive(Debug, Clone, PartialEq)]
pub struct HierData {
    pub n_days: usize,
    pub n_locations: usize,
    pub day_index: Vec<usize>,
    pub location_index: Vec<usize>,
    pub y: Vec<f64>,
}

impl HierData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.day_index.len() != n || self.location_index.len() != n {
            return Err(Error::Data(format!(
                "index vectors must match y length {n}: day {}, location {}",
                self.day_index.len(),
                self.location_index.len()
            )));
        }
        if let Some(d) = self.day_index.iter().find(|&&d| d >= self.n_days) {
            return Err(Error::Data(format!(
                "day index {d} out of range (D = {})",
                self.n_days
            )));
        }
        if let Some(j) = self.location_index.iter().find(|&&j| j >= self.n_locations) {
            return Err(Error::Data(format!(
                "location index {j} out of range (J = {})",
                self.n_locations
            )));
        }
        if let Some(v) = self.y.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite observation {v}")));
        }
        Ok(())
    }

    pub fn y_mean(&self) -> f64 {
        if self.y.is_empty() {
            0.0
        } else {
            self.y.iter().sum::<f64>() / self.y.len() as f64
        }
    }

    pub fn y_sd(&self) -> f64 {
        if self.y.len() < 2 {
            return 0.0;
        }
        let m = self.y_mean();
        (self.y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (self.y.len() - 1) as f64).sqrt()
    }

    /// Read the three-column CSV interface (`day_index,location_index,y`).
    pub fn from_csv<R: Read>(source: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(source);
        let header = reader.headers()?.clone();
        if header.iter().ne(["day_index", "location_index", "y"]) {
            return Err(Error::Data(format!(
                "hier data header mismatch: got {:?}",
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut data = HierData {
            n_days: 0,
            n_locations: 0,
            day_index: Vec::new(),
            location_index: Vec::new(),
            y: Vec::new(),
        };
        for (i, row) in reader.records().enumerate() {
            let row = row?;
            let bad = |what: &str| Error::Data(format!("hier data row {}: {what}", i + 1));
            let d: usize = row[0].parse().map_err(|_| bad("bad day_index"))?;
            let j: usize = row[1].parse().map_err(|_| bad("bad location_index"))?;
            let y: f64 = row[2].parse().map_err(|_| bad("bad y"))?;
            data.day_index.push(d);
            data.location_index.push(j);
            data.y.push(y);
            data.n_days = data.n_days.max(d + 1);
            data.n_locations = data.n_locations.max(j + 1);
        }
        data.validate()?;
        Ok(data)
    }

    pub fn to_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["day_index", "location_index", "y"])?;
        for i in 0..self.len() {
            w.write_record([
                self.day_index[i].to_string(),
                self.location_index[i].to_string(),
                self.y[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One point in parameter space, non-centered form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    pub mu: f64,
    pub eta_d: Vec<f64>,
    pub eta_j: Vec<f64>,
    pub s_d: f64,
    pub s_j: f64,
    pub s_eps: f64,
}

impl ParamState {
    pub fn z_d(&self) -> Vec<f64> {
        self.eta_d.iter().map(|e| self.s_d * e).collect()
    }

    pub fn z_j(&self) -> Vec<f64> {
        self.eta_j.iter().map(|e| self.s_j * e).collect()
    }

    pub fn yhat(&self, data: &HierData) -> Vec<f64> {
        (0..data.len())
            .map(|i| {
                self.mu
                    + self.s_d * self.eta_d[data.day_index[i]]
                    + self.s_j * self.eta_j[data.location_index[i]]
            })
            .collect()
    }
}

/// Unnormalized log posterior density of the model.
///
/// Non-positive or out-of-bound scales return -inf (a rejected state), not
/// an error.
pub fn log_posterior(state: &ParamState, data: &HierData, sigma_max: f64) -> f64 {
    if state.s_d <= 0.0
        || state.s_j <= 0.0
        || state.s_eps <= 0.0
        || state.s_d > sigma_max
        || state.s_j > sigma_max
        || state.s_eps > sigma_max
    {
        return f64::NEG_INFINITY;
    }
    let mut lp = 0.0;
    for e in state.eta_d.iter().chain(&state.eta_j) {
        lp += -0.5 * LN_2PI - 0.5 * e * e;
    }
    let ln_s = state.s_eps.ln();
    for i in 0..data.len() {
        let yhat = state.mu
            + state.s_d * state.eta_d[data.day_index[i]]
            + state.s_j * state.eta_j[data.location_index[i]];
        let r = (data.y[i] - yhat) / state.s_eps;
        lp += -ln_s - 0.5 * LN_2PI - 0.5 * r * r;
    }
    lp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Conjugate conditional sampler.
    Gibbs,
    /// Random-walk Metropolis-within-Gibbs reference sampler.
    Mwg,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub backend: Backend,
    pub chains: usize,
    pub iterations: usize,
    /// Draws discarded per chain; defaults to half the iterations.
    pub warmup: Option<usize>,
    pub seed: u64,
    /// Upper bound on the flat scale priors; defaults to 1000 x data SD.
    pub sigma_max: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            backend: Backend::Gibbs,
            chains: 4,
            iterations: 4000,
            warmup: None,
            seed: 0,
            sigma_max: None,
        }
    }
}

impl SamplerConfig {
    pub fn warmup_len(&self) -> usize {
        self.warmup.unwrap_or(self.iterations / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.chains < 2 {
            problems.push(format!("chains must be >= 2, got {}", self.chains));
        }
        if self.warmup_len() >= self.iterations {
            problems.push(format!(
                "warmup ({}) must be smaller than iterations ({})",
                self.warmup_len(),
                self.iterations
            ));
        }
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

    pub fn resolve_sigma_max(&self, data: &HierData) -> f64 {
        self.sigma_max
            .unwrap_or_else(|| 1e3 * data.y_sd().max(1e-6))
    }
}

/// Retained post-warmup draws, per chain.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub n_days: usize,
    pub n_locations: usize,
    pub iterations: usize,
    pub warmup: usize,
    /// states[chain][draw]
    pub states: Vec<Vec<ParamState>>,
    /// lp[chain][draw], finite for every retained draw.
    pub lp: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.states.len()
    }

    pub fn retained_per_chain(&self) -> usize {
        self.states.first().map(|c| c.len()).unwrap_or(0)
    }

    /// Reporting order: mu, s_d, s_j, s_eps, z_d[...], z_j[...].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            "mu".to_string(),
            "s_d".to_string(),
            "s_j".to_string(),
            "s_eps".to_string(),
        ];
        names.extend((0..self.n_days).map(|d| format!("z_d[{d}]")));
        names.extend((0..self.n_locations).map(|j| format!("z_j[{j}]")));
        names
    }

    pub fn param_count(&self) -> usize {
        4 + self.n_days + self.n_locations
    }

    pub fn param_value(state: &ParamState, idx: usize, n_days: usize) -> f64 {
        match idx {
            0 => state.mu,
            1 => state.s_d,
            2 => state.s_j,
            3 => state.s_eps,
            i if i < 4 + n_days => state.s_d * state.eta_d[i - 4],
            i => state.s_j * state.eta_j[i - 4 - n_days],
        }
    }

    /// One parameter's trace, per chain.
    pub fn param_chains(&self, idx: usize) -> Vec<Vec<f64>> {
        self.states
            .iter()
            .map(|chain| {
                chain
                    .iter()
                    .map(|s| Self::param_value(s, idx, self.n_days))
                    .collect()
            })
            .collect()
    }
}

/// Run MCMC with the configured backend. Chains run in parallel on
/// independent ChaCha streams; output is deterministic given (data, cfg).
pub fn run_mcmc(data: &HierData, cfg: &SamplerConfig) -> Result<PosteriorDraws> {
    data.validate()?;
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 observations to sample, got {}",
            data.len()
        )));
    }
    if data.n_days < 2 || data.n_locations < 2 {
        return Err(Error::Data(format!(
            "need at least 2 groups per level, got D = {}, J = {}",
            data.n_days, data.n_locations
        )));
    }
    let sigma_max = cfg.resolve_sigma_max(data);
    let mut warnings = Vec::new();
    if data.y_sd() == 0.0 {
        warnings.push("zero-variance data: posterior over scales is degenerate".to_string());
    }
    let warmup = cfg.warmup_len();

    let chain_results: Vec<Result<(Vec<ParamState>, Vec<f64>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.chains)
            .map(|chain| {
                scope.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream((1 << 48) | chain as u64);
                    match cfg.backend {
                        Backend::Gibbs => gibbs::run_chain(
                            data,
                            cfg.iterations,
                            warmup,
                            sigma_max,
                            chain,
                            &mut rng,
                        ),
                        Backend::Mwg => mwg::run_chain(
                            data,
                            cfg.iterations,
                            warmup,
                            sigma_max,
                            chain,
                            &mut rng,
                        ),
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("chain thread panicked"))
            .collect()
    });

    let mut states = Vec::with_capacity(cfg.chains);
    let mut lp = Vec::with_capacity(cfg.chains);
    for r in chain_results {
        let (s, l) = r?;
        states.push(s);
        lp.push(l);
    }
    Ok(PosteriorDraws {
        n_days: data.n_days,
        n_locations: data.n_locations,
        iterations: cfg.iterations,
        warmup,
        states,
        lp,
        warnings,
    })
}

/// Per-parameter posterior summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub se_mean: f64,
    pub sd: f64,
    pub q2_5: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q97_5: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Summarize every reported parameter: 4 + D + J rows.
pub fn posterior_summary(draws: &PosteriorDraws) -> Result<Vec<ParamSummary>> {
    if draws.retained_per_chain() == 0 {
        return Err(Error::Inference("posterior_summary on empty draws".into()));
    }
    let names = draws.param_names();
    let mut out = Vec::with_capacity(names.len());
    for (idx, name) in names.into_iter().enumerate() {
        let chains = draws.param_chains(idx);
        let all: Vec<f64> = chains.iter().flatten().copied().collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let sd = if all.len() > 1 {
            (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let ess = bulk_ess(&chains).max(1.0);
        let mut sorted = all;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.push(ParamSummary {
            name,
            mean,
            se_mean: sd / ess.sqrt(),
            sd,
            q2_5: quantile(&sorted, 0.025),
            q25: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q75: quantile(&sorted, 0.75),
            q97_5: quantile(&sorted, 0.975),
        });
    }
    Ok(out)
}

/// Columnar draws file: one row per retained draw, chain id column, one
/// column per parameter plus the lp trace.
pub fn write_draws<W: Write>(sink: W, draws: &PosteriorDraws) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend(draws.param_names());
    header.push("lp".to_string());
    w.write_record(&header)?;
    for (chain, states) in draws.states.iter().enumerate() {
        for (i, state) in states.iter().enumerate() {
            let mut row = vec![chain.to_string(), i.to_string()];
            for idx in 0..draws.param_count() {
                row.push(PosteriorDraws::param_value(state, idx, draws.n_days).to_string());
            }
            row.push(draws.lp[chain][i].to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
