//! Convergence diagnostics: split R-hat, bulk effective sample size, and
//! the lp trace summary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use super::PosteriorDraws;

/// R-hat threshold above which a parameter is flagged.
pub const RHAT_FLAG: f64 = 1.01;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Split each chain in half so the halves count as separate chains.
fn split_halves(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    let half = n / 2;
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        out.push(&c[..half]);
        out.push(&c[half..2 * half]);
    }
    out
}

/// Split R-hat. NaN when the within-chain variance is zero (degenerate
/// chains) or the chains are too short.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let halves = split_halves(chains);
    let n = halves.iter().map(|c| c.len()).min().unwrap_or(0);
    if halves.len() < 2 || n < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = halves.iter().map(|c| mean(c)).collect();
    let w = halves.iter().map(|c| sample_var(c)).sum::<f64>() / halves.len() as f64;
    let b = n as f64 * sample_var(&means);
    if w <= 0.0 {
        return f64::NAN;
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    (var_plus / w).sqrt()
}

/// Bulk effective sample size via mean per-chain autocovariances and the
/// Geyer initial-positive-sequence truncation, on split chains.
pub fn bulk_ess(chains: &[Vec<f64>]) -> f64 {
    let halves = split_halves(chains);
    let m = halves.len();
    let n = halves.iter().map(|c| c.len()).min().unwrap_or(0);
    if m < 1 || n < 4 {
        return f64::NAN;
    }
    let means: Vec<f64> = halves.iter().map(|c| mean(c)).collect();
    let vars: Vec<f64> = halves.iter().map(|c| sample_var(c)).collect();
    let w = vars.iter().sum::<f64>() / m as f64;
    let b = if m > 1 {
        n as f64 * sample_var(&means)
    } else {
        0.0
    };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    if var_plus <= 0.0 {
        return f64::NAN;
    }

    let acov_at = |lag: usize| -> f64 {
        let mut total = 0.0;
        for (c, mu) in halves.iter().zip(&means) {
            let mut s = 0.0;
            for i in 0..n - lag {
                s += (c[i] - mu) * (c[i + lag] - mu);
            }
            total += s / n as f64;
        }
        total / m as f64
    };

    let rho = |lag: usize| 1.0 - (w - acov_at(lag)) / var_plus;

    // Geyer: sum autocorrelations in pairs while the pair sums stay
    // positive and monotonically non-increasing.
    let mut tau = 1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    let total = (m * n) as f64;
    (total / tau).min(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiag {
    pub name: String,
    pub rhat: f64,
    pub ess_bulk: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub params: Vec<ParamDiag>,
    pub lp_mean: f64,
    pub lp_se_mean: f64,
    pub lp_sd: f64,
    pub max_rhat: f64,
    /// Parameters with R-hat above threshold or undefined.
    pub flagged: Vec<String>,
    pub warnings: Vec<String>,
}

impl DiagnosticsReport {
    pub fn converged(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Compute the diagnostics report. Needs at least two chains.
pub fn diagnostics(draws: &PosteriorDraws) -> Result<DiagnosticsReport> {
    if draws.n_chains() < 2 {
        return Err(Error::Inference(
            "R-hat requires at least 2 chains".to_string(),
        ));
    }
    if draws.retained_per_chain() < 4 {
        return Err(Error::Inference("too few retained draws".to_string()));
    }
    let mut params = Vec::new();
    let mut flagged = Vec::new();
    let mut max_rhat = f64::NEG_INFINITY;
    for (idx, name) in draws.param_names().into_iter().enumerate() {
        let chains = draws.param_chains(idx);
        let rhat = split_rhat(&chains);
        let ess = bulk_ess(&chains);
        let bad = !rhat.is_finite() || rhat > RHAT_FLAG;
        if bad {
            flagged.push(name.clone());
        }
        if rhat.is_finite() {
            max_rhat = max_rhat.max(rhat);
        }
        params.push(ParamDiag {
            name,
            rhat,
            ess_bulk: ess,
            flagged: bad,
        });
    }
    let all_lp: Vec<f64> = draws.lp.iter().flatten().copied().collect();
    let lp_mean = mean(&all_lp);
    let lp_sd = sample_var(&all_lp).sqrt();
    let lp_ess = bulk_ess(&draws.lp).max(1.0);
    Ok(DiagnosticsReport {
        params,
        lp_mean,
        lp_se_mean: lp_sd / lp_ess.sqrt(),
        lp_sd,
        max_rhat,
        flagged,
        warnings: draws.warnings.clone(),
    })
}
