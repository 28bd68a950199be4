//! Random-walk Metropolis-within-Gibbs reference backend.
//!
//! Every scalar coordinate of the non-centered state (mu, each eta, each
//! scale) gets a symmetric Gaussian proposal, accepted against the exact
//! target density. Step sizes adapt toward a 0.44 acceptance rate during
//! warmup and freeze afterwards. Slower than the conjugate sampler, but the
//! target evaluation is the single `log_posterior` everyone can audit.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use super::{log_posterior, HierData, ParamState, LN_2PI};

const TARGET_ACCEPT: f64 = 0.44;

struct Groups {
    rows_by_day: Vec<Vec<usize>>,
    rows_by_loc: Vec<Vec<usize>>,
}

fn loglik_rows(state: &ParamState, data: &HierData, rows: &[usize]) -> f64 {
    let ln_s = state.s_eps.ln();
    rows.iter()
        .map(|&i| {
            let yhat = state.mu
                + state.s_d * state.eta_d[data.day_index[i]]
                + state.s_j * state.eta_j[data.location_index[i]];
            let r = (data.y[i] - yhat) / state.s_eps;
            -ln_s - 0.5 * LN_2PI - 0.5 * r * r
        })
        .sum()
}

fn loglik_all(state: &ParamState, data: &HierData) -> f64 {
    let all: Vec<usize> = (0..data.len()).collect();
    loglik_rows(state, data, &all)
}

pub(super) fn run_chain(
    data: &HierData,
    iterations: usize,
    warmup: usize,
    sigma_max: f64,
    chain: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<ParamState>, Vec<f64>)> {
    let d = data.n_days;
    let j = data.n_locations;
    let y_sd = data.y_sd().max(1e-6);
    let all_rows: Vec<usize> = (0..data.len()).collect();
    let mut groups = Groups {
        rows_by_day: vec![Vec::new(); d],
        rows_by_loc: vec![Vec::new(); j],
    };
    for i in 0..data.len() {
        groups.rows_by_day[data.day_index[i]].push(i);
        groups.rows_by_loc[data.location_index[i]].push(i);
    }

    let normal = |rng: &mut dyn rand::RngCore| -> f64 { StandardNormal.sample(rng) };
    let mut state = ParamState {
        mu: data.y_mean() + 0.5 * y_sd * normal(rng),
        eta_d: (0..d).map(|_| 0.3 * normal(rng)).collect(),
        eta_j: (0..j).map(|_| 0.3 * normal(rng)).collect(),
        s_d: (y_sd * (0.5 + rng.random::<f64>())).min(sigma_max),
        s_j: (y_sd * (0.5 + rng.random::<f64>())).min(sigma_max),
        s_eps: (y_sd * (0.5 + rng.random::<f64>())).min(sigma_max),
    };

    // Coordinates: mu, eta_d[..], eta_j[..], s_d, s_j, s_eps.
    let n_coords = 4 + d + j;
    let mut steps = vec![0.0f64; n_coords];
    steps[0] = y_sd;
    for s in steps.iter_mut().take(1 + d + j).skip(1) {
        *s = 0.5;
    }
    for s in steps.iter_mut().skip(1 + d + j) {
        *s = 0.5 * y_sd;
    }

    let retained = iterations - warmup;
    let mut states = Vec::with_capacity(retained);
    let mut lps = Vec::with_capacity(retained);

    for iter in 0..iterations {
        let gamma = if iter < warmup {
            (iter as f64 + 1.0).powf(-0.6)
        } else {
            0.0
        };
        for coord in 0..n_coords {
            // Prior term and the rows whose likelihood the coordinate touches.
            let (rows, prior_cur): (&[usize], f64) = if coord == 0 {
                (&all_rows, 0.0)
            } else if coord < 1 + d {
                let e = state.eta_d[coord - 1];
                (&groups.rows_by_day[coord - 1], -0.5 * e * e)
            } else if coord < 1 + d + j {
                let e = state.eta_j[coord - 1 - d];
                (&groups.rows_by_loc[coord - 1 - d], -0.5 * e * e)
            } else {
                (&all_rows, 0.0)
            };
            let cur_ll = loglik_rows(&state, data, rows) + prior_cur;

            let delta = steps[coord] * normal(rng);
            let mut proposal = state.clone();
            let mut prior_new = 0.0;
            let mut in_support = true;
            if coord == 0 {
                proposal.mu += delta;
            } else if coord < 1 + d {
                let e = proposal.eta_d[coord - 1] + delta;
                proposal.eta_d[coord - 1] = e;
                prior_new = -0.5 * e * e;
            } else if coord < 1 + d + j {
                let e = proposal.eta_j[coord - 1 - d] + delta;
                proposal.eta_j[coord - 1 - d] = e;
                prior_new = -0.5 * e * e;
            } else {
                let which = coord - 1 - d - j;
                let target = match which {
                    0 => &mut proposal.s_d,
                    1 => &mut proposal.s_j,
                    _ => &mut proposal.s_eps,
                };
                *target += delta;
                if *target <= 0.0 || *target > sigma_max {
                    in_support = false;
                }
            }

            let accept_prob = if in_support {
                let new_ll = loglik_rows(&proposal, data, rows) + prior_new;
                (new_ll - cur_ll).exp().min(1.0)
            } else {
                0.0
            };
            if rng.random::<f64>() < accept_prob {
                state = proposal;
            }
            if gamma > 0.0 {
                steps[coord] = (steps[coord].ln() + gamma * (accept_prob - TARGET_ACCEPT))
                    .exp()
                    .clamp(1e-6, 1e3);
            }
        }

        if iter >= warmup {
            let lp = log_posterior(&state, data, sigma_max);
            if !lp.is_finite() {
                return Err(Error::Inference(format!(
                    "non-finite lp at chain {chain}, iteration {iter}: state {state:?}"
                )));
            }
            debug_assert!((lp
                - (loglik_all(&state, data)
                    + state
                        .eta_d
                        .iter()
                        .chain(&state.eta_j)
                        .map(|e| -0.5 * LN_2PI - 0.5 * e * e)
                        .sum::<f64>()))
            .abs()
                < 1e-8);
            states.push(state.clone());
            lps.push(lp);
        }
    }
    Ok((states, lps))
}
