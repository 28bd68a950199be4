//! Synthetic transaction-stream generator.
//!
//! Sales arrivals for one location-day follow an inhomogeneous renewal
//! process with per-minute intensity
//!
//! ```text
//! lambda(t) = g * exp(c0 + c1*t~ + c2*t~^2)
//! ```
//!
//! where `t~` is centered time on `[-1, 1]` and `g` is a Gamma multiplier
//! with mean 1 that produces over-dispersed (negative-binomial-like) counts
//! when the dispersion knob is positive. The latent coefficients for each
//! location-day come from a two-way additive structure with known global
//! mean, day-of-week effects, and location effects, so downstream inference
//! can be scored against ground truth.
//!
//! All randomness flows through per-(location, day) ChaCha streams derived
//! from one seed, so the stream is reproducible bit-for-bit and location-days
//! can be generated in parallel without shared state.

use chrono::{Datelike, NaiveDate, NaiveDateTime, TimeDelta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TransactionRecord;
use crate::timegrid::BinGrid;

/// Calendar day 0 of every synthetic run. A Monday, so day-of-week index
/// equals `day % 7` with Monday = 0.
pub fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 1, 1).unwrap()
}

/// Minutes past midnight at which stores open.
pub const OPENING_MINUTE: u32 = 6 * 60;

pub const N_WEEKDAYS: usize = 7;

/// The generative parameters the inference layer must recover.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Global mean of the c0-scale log rate.
    pub mu: f64,
    /// True day-of-week effects, Monday first. Length 7.
    pub day_effects: Vec<f64>,
    /// True location effects. Length J.
    pub location_effects: Vec<f64>,
    pub sigma_d: f64,
    pub sigma_j: f64,
    pub sigma_eps: f64,
    /// Magnitude of the true trend coefficient relative to the c0 structure.
    pub trend_scale: f64,
    /// Magnitude of the true curvature coefficient.
    pub curvature_scale: f64,
    pub minutes_open: u32,
    /// 0 = pure Poisson arrivals; larger values Gamma-mix the intensity.
    pub overdispersion: f64,
    /// Mean items per transaction, drawn as 1 + Poisson(mean_quantity - 1).
    pub mean_quantity: f64,
}

impl GroundTruth {
    pub fn n_locations(&self) -> usize {
        self.location_effects.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.day_effects.len() != N_WEEKDAYS {
            problems.push(format!(
                "day_effects must have exactly 7 entries, got {}",
                self.day_effects.len()
            ));
        }
        if self.location_effects.is_empty() {
            problems.push("location_effects must have at least 1 entry".into());
        }
        for (name, v) in [
            ("sigma_d", self.sigma_d),
            ("sigma_j", self.sigma_j),
            ("sigma_eps", self.sigma_eps),
            ("overdispersion", self.overdispersion),
        ] {
            if !(v >= 0.0) {
                problems.push(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.minutes_open < 1 {
            problems.push("minutes_open must be >= 1".into());
        }
        if !(self.mean_quantity >= 1.0) {
            problems.push(format!(
                "mean_quantity must be >= 1, got {}",
                self.mean_quantity
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Draw day and location effects from their Normal(0, sigma) laws.
    pub fn sample_effects(&mut self, n_locations: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(EFFECTS_STREAM);
        let nd = Normal::new(0.0, self.sigma_d).expect("sigma_d >= 0");
        self.day_effects = (0..N_WEEKDAYS).map(|_| nd.sample(&mut rng)).collect();
        let nj = Normal::new(0.0, self.sigma_j).expect("sigma_j >= 0");
        self.location_effects = (0..n_locations).map(|_| nj.sample(&mut rng)).collect();
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_locations: usize,
    pub n_days: usize,
    pub seed: u64,
    /// Fraction of location-days that emit no records at all. The dropped
    /// set has exactly `floor(fraction * n_locations * n_days)` members,
    /// chosen by a seeded shuffle.
    pub missing_day_fraction: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_locations < 1 {
            problems.push("n_locations must be >= 1".to_string());
        }
        if self.n_days < 1 {
            problems.push("n_days must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.missing_day_fraction) {
            problems.push(format!(
                "missing_day_fraction must be in [0, 1], got {}",
                self.missing_day_fraction
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Latent log-rate polynomial for one location-day, monomial form in
/// centered time: `log lambda(t~) = c0 + c1 t~ + c2 t~^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Curve {
    pub fn log_rate(&self, t_centered: f64) -> f64 {
        self.c0 + self.c1 * t_centered + self.c2 * t_centered * t_centered
    }

    pub fn rate(&self, t_centered: f64) -> f64 {
        self.log_rate(t_centered).exp()
    }

    /// Maximum of the rate over `t~ in [-1, 1]`.
    pub fn max_rate(&self) -> f64 {
        let mut best = self.rate(-1.0).max(self.rate(1.0));
        if self.c2 != 0.0 {
            let t_star = -self.c1 / (2.0 * self.c2);
            if (-1.0..=1.0).contains(&t_star) {
                best = best.max(self.rate(t_star));
            }
        }
        best
    }
}

/// One arrival event within a day: minutes since opening (whole-minute
/// resolution) and the item quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SalesEvent {
    pub minute: u32,
    pub quantity: u32,
}

// Stream ids for seed-splitting. Location-day streams use the low 63 bits;
// the two reserved streams have the top bit set.
const EFFECTS_STREAM: u64 = (1 << 63) | 1;
const MISSING_STREAM: u64 = (1 << 63) | 2;

fn location_day_stream(location: usize, day: usize) -> u64 {
    ((location as u64) << 32) | day as u64
}

/// RNG for one location-day, independent of all other streams.
pub fn location_day_rng(seed: u64, location: usize, day: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(location_day_stream(location, day));
    rng
}

/// Draw the true (c0, c1, c2) for one location-day.
///
/// c0 = mu + z_d + z_j + Normal(0, sigma_eps); c1 and c2 carry the same
/// additive structure scaled by `trend_scale` / `curvature_scale`, each with
/// its own independent noise draw.
pub fn sample_location_day_curve(
    gt: &GroundTruth,
    location: usize,
    day_of_week: usize,
    rng: &mut impl Rng,
) -> Result<Curve> {
    if location >= gt.n_locations() {
        return Err(Error::Config(format!(
            "location index {location} out of range (J = {})",
            gt.n_locations()
        )));
    }
    if day_of_week >= N_WEEKDAYS {
        return Err(Error::Config(format!(
            "day_of_week index {day_of_week} out of range (must be < 7)"
        )));
    }
    let base = gt.mu + gt.day_effects[day_of_week] + gt.location_effects[location];
    let noise = Normal::new(0.0, gt.sigma_eps).expect("sigma_eps >= 0");
    let c0 = base + noise.sample(rng);
    let c1 = gt.trend_scale * (base + noise.sample(rng));
    let c2 = gt.curvature_scale * (base + noise.sample(rng));
    Ok(Curve { c0, c1, c2 })
}

/// Simulate one day of arrivals by Lewis-Shedler thinning.
///
/// Events come out sorted, with whole-minute timestamps in
/// `[0, minutes_open)` and quantities >= 1.
pub fn simulate_day(
    curve: Curve,
    minutes_open: u32,
    overdispersion: f64,
    mean_quantity: f64,
    rng: &mut impl Rng,
) -> Vec<SalesEvent> {
    let m = minutes_open as f64;
    let disp = if overdispersion > 0.0 {
        Gamma::new(1.0 / overdispersion, overdispersion)
            .expect("valid gamma")
            .sample(rng)
    } else {
        1.0
    };
    let lambda_max = disp * curve.max_rate();
    let mut events = Vec::new();
    if lambda_max <= 0.0 || !lambda_max.is_finite() {
        return events;
    }
    let qty_extra = if mean_quantity > 1.0 {
        Some(Poisson::new(mean_quantity - 1.0).expect("mean_quantity > 1"))
    } else {
        None
    };
    let mut t = 0.0_f64;
    loop {
        let u: f64 = rng.random();
        t += -u.ln() / lambda_max;
        if t >= m {
            break;
        }
        let accept: f64 = rng.random();
        let lam = disp * curve.rate(2.0 * t / m - 1.0);
        if accept * lambda_max <= lam {
            let quantity = 1 + qty_extra
                .as_ref()
                .map(|p| p.sample(rng) as u32)
                .unwrap_or(0);
            events.push(SalesEvent {
                minute: t as u32,
                quantity,
            });
        }
    }
    events
}

/// Indices of the location-days censored from the output stream.
fn missing_set(cfg: &SimConfig) -> Vec<bool> {
    let total = cfg.n_locations * cfg.n_days;
    let n_missing = (cfg.missing_day_fraction * total as f64).floor() as usize;
    let mut mask = vec![false; total];
    if n_missing == 0 {
        return mask;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(MISSING_STREAM);
    // Partial Fisher-Yates: the first n_missing slots of a shuffle.
    let mut idx: Vec<usize> = (0..total).collect();
    for i in 0..n_missing.min(total) {
        let j = rng.random_range(i..total);
        idx.swap(i, j);
        mask[idx[i]] = true;
    }
    mask
}

/// Generate the full transaction stream for a fleet of locations.
pub fn generate_dataset(cfg: &SimConfig, gt: &GroundTruth) -> Result<Vec<TransactionRecord>> {
    cfg.validate()?;
    gt.validate()?;
    if cfg.n_locations > gt.n_locations() {
        return Err(Error::Config(format!(
            "n_locations ({}) exceeds ground-truth location_effects length ({})",
            cfg.n_locations,
            gt.n_locations()
        )));
    }
    let missing = missing_set(cfg);
    let open_delta = TimeDelta::minutes(OPENING_MINUTE as i64);
    let mut records = Vec::new();
    for location in 0..cfg.n_locations {
        for day in 0..cfg.n_days {
            if missing[location * cfg.n_days + day] {
                continue;
            }
            let date = epoch() + TimeDelta::days(day as i64);
            let dow = date.weekday().num_days_from_monday() as usize;
            debug_assert_eq!(dow, day % 7);
            let mut rng = location_day_rng(cfg.seed, location, day);
            let curve = sample_location_day_curve(gt, location, dow, &mut rng)?;
            let events = simulate_day(
                curve,
                gt.minutes_open,
                gt.overdispersion,
                gt.mean_quantity,
                &mut rng,
            );
            let opening: NaiveDateTime = date.and_hms_opt(0, 0, 0).unwrap() + open_delta;
            for ev in events {
                records.push(TransactionRecord {
                    location_number: location as u32 + 1,
                    sales_day_name: date.weekday(),
                    daily_minutes_open: gt.minutes_open,
                    date_time_placed: opening + TimeDelta::minutes(ev.minute as i64),
                    sales_as_minutes: ev.minute as f64,
                    quantity: ev.quantity,
                });
            }
        }
    }
    Ok(records)
}

/// Exact expected event count for one day: integral of the intensity over
/// the opening window, by fine midpoint quadrature.
pub fn expected_events(curve: Curve, minutes_open: u32) -> f64 {
    let grid = BinGrid::new(minutes_open, 1).expect("valid");
    let n = 20 * grid.n_bins();
    let m = minutes_open as f64;
    let h = m / n as f64;
    (0..n)
        .map(|i| curve.rate(grid.centered((i as f64 + 0.5) * h)))
        .sum::<f64>()
        * h
}
