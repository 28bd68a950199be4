//! Conjugate Gibbs sampler.
//!
//! Internally the chain walks the centered parameterization (mu, z_d, z_j,
//! scales); the non-centered identities eta = z / s are restored when a draw
//! is stored. Under the flat priors every conditional is exact:
//!
//! * mu | rest            ~ Normal(mean residual, s_eps^2 / N)
//! * z_d[d] | rest        ~ Normal with precision n_d/s_eps^2 + 1/s_d^2
//! * 1/s^2 | effects      ~ Gamma((k - 1)/2, sum(z^2)/2)   (flat prior on s)
//!
//! the last one truncated so s stays within (0, sigma_max].
//!
//! Each sweep also applies one exact translation-group move per effect
//! level, shifting mass between mu and the effect mean; without it the
//! flat direction mu + mean(z) mixes arbitrarily slowly at scale.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use super::{log_posterior, HierData, ParamState};

const S_FLOOR: f64 = 1e-12;

struct Groups {
    rows_by_day: Vec<Vec<usize>>,
    rows_by_loc: Vec<Vec<usize>>,
}

impl Groups {
    fn build(data: &HierData) -> Self {
        let mut rows_by_day = vec![Vec::new(); data.n_days];
        let mut rows_by_loc = vec![Vec::new(); data.n_locations];
        for i in 0..data.len() {
            rows_by_day[data.day_index[i]].push(i);
            rows_by_loc[data.location_index[i]].push(i);
        }
        Groups {
            rows_by_day,
            rows_by_loc,
        }
    }
}

/// Draw a scale from its conditional: precision ~ Gamma((k-1)/2, ssq/2),
/// truncated to s <= sigma_max.
fn draw_scale(ssq: f64, k: usize, sigma_max: f64, rng: &mut impl Rng) -> f64 {
    let shape = (k as f64 - 1.0) / 2.0;
    let rate = (0.5 * ssq).max(1e-300);
    let gamma = Gamma::new(shape, 1.0 / rate).expect("valid gamma");
    for _ in 0..1000 {
        let precision: f64 = gamma.sample(rng);
        let s = precision.sqrt().recip();
        if s <= sigma_max {
            return s.max(S_FLOOR);
        }
    }
    sigma_max
}

pub(super) fn run_chain(
    data: &HierData,
    iterations: usize,
    warmup: usize,
    sigma_max: f64,
    chain: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<ParamState>, Vec<f64>)> {
    let n = data.len();
    let groups = Groups::build(data);
    let y_sd = data.y_sd().max(1e-6);

    // Overdispersed initialization.
    let normal = |rng: &mut dyn rand::RngCore| -> f64 { StandardNormal.sample(rng) };
    // mu's conditional does not depend on its previous value, so it needs
    // no explicit initialization; the first sweep draws it fresh.
    let mut mu;
    let mut s_d = (y_sd * (0.5 + rng.random::<f64>())).min(sigma_max);
    let mut s_j = (y_sd * (0.5 + rng.random::<f64>())).min(sigma_max);
    let mut s_eps = (y_sd * (0.5 + rng.random::<f64>())).min(sigma_max);
    let mut z_d: Vec<f64> = (0..data.n_days).map(|_| 0.3 * s_d * normal(rng)).collect();
    let mut z_j: Vec<f64> = (0..data.n_locations)
        .map(|_| 0.3 * s_j * normal(rng))
        .collect();

    let retained = iterations - warmup;
    let mut states = Vec::with_capacity(retained);
    let mut lps = Vec::with_capacity(retained);

    for iter in 0..iterations {
        // mu
        let resid_sum: f64 = (0..n)
            .map(|i| data.y[i] - z_d[data.day_index[i]] - z_j[data.location_index[i]])
            .sum();
        let mu_sd = s_eps / (n as f64).sqrt();
        mu = resid_sum / n as f64 + mu_sd * normal(rng);

        // Day effects.
        let eps_prec = 1.0 / (s_eps * s_eps);
        for (d, rows) in groups.rows_by_day.iter().enumerate() {
            let prior_prec = 1.0 / (s_d * s_d);
            let resid: f64 = rows
                .iter()
                .map(|&i| data.y[i] - mu - z_j[data.location_index[i]])
                .sum();
            let prec = rows.len() as f64 * eps_prec + prior_prec;
            let mean = resid * eps_prec / prec;
            z_d[d] = mean + prec.sqrt().recip() * normal(rng);
        }

        // Location effects.
        for (j, rows) in groups.rows_by_loc.iter().enumerate() {
            let prior_prec = 1.0 / (s_j * s_j);
            let resid: f64 = rows
                .iter()
                .map(|&i| data.y[i] - mu - z_d[data.day_index[i]])
                .sum();
            let prec = rows.len() as f64 * eps_prec + prior_prec;
            let mean = resid * eps_prec / prec;
            z_j[j] = mean + prec.sqrt().recip() * normal(rng);
        }

        // Translation-group moves (generalized Gibbs): the likelihood only
        // pins down mu plus the mean effect, so shift that flat direction
        // exactly. delta | rest ~ Normal(mean(z), s^2 / K) targets the
        // density of (mu + delta, z - delta), which leaves the likelihood
        // untouched and decorrelates mu from the effects.
        for (z, s) in [(&mut z_d, s_d), (&mut z_j, s_j)] {
            let k = z.len() as f64;
            let z_bar = z.iter().sum::<f64>() / k;
            let delta = z_bar + s / k.sqrt() * normal(rng);
            for v in z.iter_mut() {
                *v -= delta;
            }
            mu += delta;
        }

        // Scales.
        s_d = draw_scale(z_d.iter().map(|z| z * z).sum(), data.n_days, sigma_max, rng);
        s_j = draw_scale(
            z_j.iter().map(|z| z * z).sum(),
            data.n_locations,
            sigma_max,
            rng,
        );
        let ssr: f64 = (0..n)
            .map(|i| {
                let r = data.y[i] - mu - z_d[data.day_index[i]] - z_j[data.location_index[i]];
                r * r
            })
            .sum();
        s_eps = draw_scale(ssr.max(1e-300), n, sigma_max, rng);

        if iter >= warmup {
            let state = ParamState {
                mu,
                eta_d: z_d.iter().map(|z| z / s_d).collect(),
                eta_j: z_j.iter().map(|z| z / s_j).collect(),
                s_d,
                s_j,
                s_eps,
            };
            let lp = log_posterior(&state, data, sigma_max);
            if !lp.is_finite() {
                return Err(Error::Inference(format!(
                    "non-finite lp at chain {chain}, iteration {iter}: state {state:?}"
                )));
            }
            states.push(state);
            lps.push(lp);
        }
    }
    Ok((states, lps))
}
