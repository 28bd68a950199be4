use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn state(mu: f64, eta_d: Vec<f64>, eta_j: Vec<f64>, s: [f64; 3]) -> ParamState {
    ParamState {
        mu,
        eta_d,
        eta_j,
        s_d: s[0],
        s_j: s[1],
        s_eps: s[2],
    }
}

fn empty_data(d: usize, j: usize) -> HierData {
    HierData {
        n_days: d,
        n_locations: j,
        day_index: vec![],
        location_index: vec![],
        y: vec![],
    }
}

/// Synthetic crossed-effects data with known truth.
pub fn synth_data(
    d: usize,
    j: usize,
    n: usize,
    mu: f64,
    sigma_d: f64,
    sigma_j: f64,
    sigma_eps: f64,
    seed: u64,
) -> (HierData, f64, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let z_d: Vec<f64> = (0..d).map(|_| sigma_d * normal(&mut rng)).collect();
    let z_j: Vec<f64> = (0..j).map(|_| sigma_j * normal(&mut rng)).collect();
    let mut data = HierData {
        n_days: d,
        n_locations: j,
        day_index: Vec::with_capacity(n),
        location_index: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
    };
    for i in 0..n {
        let di = i % d;
        let ji = (i / d) % j;
        data.day_index.push(di);
        data.location_index.push(ji);
        data.y
            .push(mu + z_d[di] + z_j[ji] + sigma_eps * normal(&mut rng));
    }
    (data, mu, z_d, z_j)
}

#[test]
fn prior_only_value_on_empty_likelihood() {
    let data = empty_data(2, 3);
    let s = state(5.0, vec![0.5, -0.5], vec![1.0, 0.0, -1.0], [1.0, 1.0, 1.0]);
    let lp = log_posterior(&s, &data, 1e6);
    let want: f64 = s
        .eta_d
        .iter()
        .chain(&s.eta_j)
        .map(|e| -0.5 * LN_2PI - 0.5 * e * e)
        .sum();
    assert!((lp - want).abs() < 1e-12);
}

#[test]
fn single_observation_at_mode() {
    let data = HierData {
        n_days: 2,
        n_locations: 2,
        day_index: vec![0],
        location_index: vec![0],
        y: vec![3.0],
    };
    let s = state(3.0, vec![0.0, 0.0], vec![0.0, 0.0], [1.0, 1.0, 1.0]);
    let lp = log_posterior(&s, &data, 1e6);
    // All etas are zero, so the likelihood contributes -ln(2*pi)/2 and each
    // of the four eta priors contributes its normalizing constant.
    assert!((lp - (-0.5 * LN_2PI * 5.0)).abs() < 1e-12);
}

#[test]
fn log_posterior_matches_resummation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let (data, ..) = synth_data(2, 2, 6, 1.0, 0.3, 0.2, 0.5, rng.random());
        let s = state(
            rng.random_range(-1.0..2.0),
            vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            [
                rng.random_range(0.1..2.0),
                rng.random_range(0.1..2.0),
                rng.random_range(0.1..2.0),
            ],
        );
        // Independently coded sum of normal log densities.
        let ln_norm =
            |x: f64, m: f64, sd: f64| -(sd.ln()) - 0.5 * LN_2PI - 0.5 * ((x - m) / sd).powi(2);
        let mut want = 0.0;
        for e in s.eta_d.iter().chain(&s.eta_j) {
            want += ln_norm(*e, 0.0, 1.0);
        }
        for i in 0..data.len() {
            let yhat = s.mu
                + s.s_d * s.eta_d[data.day_index[i]]
                + s.s_j * s.eta_j[data.location_index[i]];
            want += ln_norm(data.y[i], yhat, s.s_eps);
        }
        let got = log_posterior(&s, &data, 1e6);
        assert!(
            (got - want).abs() <= 1e-12 * want.abs().max(1.0),
            "{got} vs {want}"
        );
    }
}

#[test]
fn non_positive_scale_is_rejected_not_thrown() {
    let data = empty_data(2, 2);
    let s = state(0.0, vec![0.0; 2], vec![0.0; 2], [0.0, 1.0, 1.0]);
    assert_eq!(log_posterior(&s, &data, 1e6), f64::NEG_INFINITY);
    let s = state(0.0, vec![0.0; 2], vec![0.0; 2], [1.0, 1.0, 1e9]);
    assert_eq!(log_posterior(&s, &data, 1e6), f64::NEG_INFINITY);
}

fn quick_cfg(backend: Backend, seed: u64, iterations: usize) -> SamplerConfig {
    SamplerConfig {
        backend,
        chains: 2,
        iterations,
        warmup: None,
        seed,
        sigma_max: None,
    }
}

#[test]
fn gibbs_recovers_known_effects() {
    let (data, mu, z_d, z_j) = synth_data(2, 2, 10_000, 1.0, 0.4, 0.6, 0.5, 42);
    let draws = run_mcmc(&data, &quick_cfg(Backend::Gibbs, 7, 2000)).unwrap();
    let summary = posterior_summary(&draws).unwrap();
    let truth: Vec<(String, f64)> = [
        ("mu".to_string(), mu),
        ("z_d[0]".to_string(), z_d[0]),
        ("z_d[1]".to_string(), z_d[1]),
        ("z_j[0]".to_string(), z_j[0]),
        ("z_j[1]".to_string(), z_j[1]),
    ]
    .into();
    for (name, want) in truth {
        let row = summary.iter().find(|r| r.name == name).unwrap();
        assert!(
            (row.mean - want).abs() < 3.0 * row.sd,
            "{name}: mean {} vs truth {want} (posterior sd {})",
            row.mean,
            row.sd
        );
    }
}

#[test]
fn draws_are_deterministic_given_seed() {
    let (data, ..) = synth_data(3, 4, 200, 0.5, 0.2, 0.3, 0.4, 1);
    for backend in [Backend::Gibbs, Backend::Mwg] {
        let a = run_mcmc(&data, &quick_cfg(backend, 9, 400)).unwrap();
        let b = run_mcmc(&data, &quick_cfg(backend, 9, 400)).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.lp, b.lp);
        let c = run_mcmc(&data, &quick_cfg(backend, 10, 400)).unwrap();
        assert_ne!(a.states, c.states);
    }
}

#[test]
fn non_centered_identity_holds_exactly() {
    let (data, ..) = synth_data(3, 4, 120, 0.5, 0.2, 0.3, 0.4, 3);
    let draws = run_mcmc(&data, &quick_cfg(Backend::Gibbs, 5, 300)).unwrap();
    for chain in &draws.states {
        for s in chain {
            let z_d = s.z_d();
            let z_j = s.z_j();
            for (d, z) in z_d.iter().enumerate() {
                assert_eq!(*z, s.s_d * s.eta_d[d]);
            }
            // yhat consistency with the model equation, every row.
            let yhat = s.yhat(&data);
            for i in 0..data.len() {
                let direct = s.mu + z_d[data.day_index[i]] + z_j[data.location_index[i]];
                assert!((yhat[i] - direct).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn summary_has_4_plus_d_plus_j_rows() {
    let (data, ..) = synth_data(7, 49, 500, 1.0, 0.1, 0.2, 0.3, 8);
    let draws = run_mcmc(&data, &quick_cfg(Backend::Gibbs, 2, 400)).unwrap();
    let summary = posterior_summary(&draws).unwrap();
    assert_eq!(summary.len(), 60);
    assert_eq!(summary[0].name, "mu");
    assert_eq!(summary[4].name, "z_d[0]");
    assert_eq!(summary[59].name, "z_j[48]");
}

#[test]
fn lp_mean_is_stable_across_reruns() {
    let (data, ..) = synth_data(3, 3, 150, 0.5, 0.2, 0.3, 0.4, 12);
    let cfg = quick_cfg(Backend::Gibbs, 31, 500);
    let a = diagnostics(&run_mcmc(&data, &cfg).unwrap()).unwrap();
    let b = diagnostics(&run_mcmc(&data, &cfg).unwrap()).unwrap();
    assert_eq!(a.lp_mean.to_bits(), b.lp_mean.to_bits());
}

#[test]
fn label_permutation_permutes_location_summaries() {
    let (data, ..) = synth_data(3, 5, 3000, 1.0, 0.3, 0.5, 0.3, 77);
    let perm = [2usize, 0, 4, 1, 3];
    let permuted = HierData {
        n_days: data.n_days,
        n_locations: data.n_locations,
        day_index: data.day_index.clone(),
        location_index: data.location_index.iter().map(|&j| perm[j]).collect(),
        y: data.y.clone(),
    };
    let cfg = SamplerConfig {
        chains: 4,
        iterations: 4000,
        ..quick_cfg(Backend::Gibbs, 5, 4000)
    };
    let base = posterior_summary(&run_mcmc(&data, &cfg).unwrap()).unwrap();
    let moved = posterior_summary(&run_mcmc(&permuted, &cfg).unwrap()).unwrap();
    for (j, &pj) in perm.iter().enumerate() {
        let a = base.iter().find(|r| r.name == format!("z_j[{j}]")).unwrap();
        let b = moved
            .iter()
            .find(|r| r.name == format!("z_j[{pj}]"))
            .unwrap();
        let tol = 4.0 * (a.se_mean.powi(2) + b.se_mean.powi(2)).sqrt() + 1e-3;
        assert!(
            (a.mean - b.mean).abs() < tol,
            "z_j[{j}] {} vs permuted {} (tol {tol})",
            a.mean,
            b.mean
        );
    }
}

#[test]
fn single_chain_diagnostics_is_an_error() {
    let (data, ..) = synth_data(2, 2, 50, 0.0, 0.1, 0.1, 0.3, 2);
    let mut draws = run_mcmc(&data, &quick_cfg(Backend::Gibbs, 1, 200)).unwrap();
    draws.states.truncate(1);
    draws.lp.truncate(1);
    assert!(diagnostics(&draws).is_err());
}

#[test]
fn zero_variance_data_warns() {
    let data = HierData {
        n_days: 2,
        n_locations: 2,
        day_index: vec![0, 1, 0, 1],
        location_index: vec![0, 0, 1, 1],
        y: vec![2.0; 4],
    };
    let draws = run_mcmc(&data, &quick_cfg(Backend::Gibbs, 3, 200)).unwrap();
    assert!(draws.warnings.iter().any(|w| w.contains("zero-variance")));
}

#[test]
fn posterior_sd_of_mu_contracts_like_sqrt_n() {
    // No true group structure; fixed truth, growing N.
    let sd_at = |n: usize| -> f64 {
        let (data, ..) = synth_data(7, 10, n, 1.0, 0.0, 0.0, 0.5, 321);
        let cfg = SamplerConfig {
            chains: 4,
            iterations: 3000,
            ..quick_cfg(Backend::Gibbs, 17, 3000)
        };
        let summary = posterior_summary(&run_mcmc(&data, &cfg).unwrap()).unwrap();
        summary.iter().find(|r| r.name == "mu").unwrap().sd
    };
    let s2 = sd_at(100);
    let s3 = sd_at(1000);
    let s4 = sd_at(10_000);
    let root10 = 10f64.sqrt();
    for (hi, lo) in [(s2, s3), (s3, s4)] {
        let ratio = hi / lo;
        assert!(
            ratio > root10 / 2.0 && ratio < root10 * 2.0,
            "contraction ratio {ratio} outside [sqrt(10)/2, 2 sqrt(10)] (sds {s2}, {s3}, {s4})"
        );
    }
}

#[test]
fn hier_data_csv_round_trips() {
    let (data, ..) = synth_data(3, 4, 40, 0.5, 0.2, 0.3, 0.4, 15);
    let mut buf = Vec::new();
    data.to_csv(&mut buf).unwrap();
    let back = HierData::from_csv(buf.as_slice()).unwrap();
    assert_eq!(data, back);
}

#[test]
fn draws_csv_has_columnar_layout() {
    let (data, ..) = synth_data(2, 3, 60, 0.5, 0.2, 0.3, 0.4, 6);
    let draws = run_mcmc(&data, &quick_cfg(Backend::Gibbs, 4, 100)).unwrap();
    let mut buf = Vec::new();
    write_draws(&mut buf, &draws).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert_eq!(
        header,
        "chain,draw,mu,s_d,s_j,s_eps,z_d[0],z_d[1],z_j[0],z_j[1],z_j[2],lp"
    );
    assert_eq!(lines.count(), 2 * 50);
}
