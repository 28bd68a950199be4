//! Per-location-day quadratic fits to the log of the binned counts.
//!
//! The fit uses discrete orthonormal polynomials {P0, P1, P2} built on the
//! centered bin midpoints, orthonormal under the normalized inner product
//! `<u, v> = (1/K) sum_k u_k v_k`. With that normalization P0 is identically
//! one, so c0 is the mean log count (the average daily demand on the log
//! scale), c1 the daily trend, and c2 the peakedness. Because the basis is
//! orthonormal, ordinary least squares reduces to three projections.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{BinnedSeries, LocationDay};

/// Which coefficient class a hierarchical run models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoeffClass {
    C0,
    C1,
    C2,
}

impl CoeffClass {
    pub const ALL: [CoeffClass; 3] = [CoeffClass::C0, CoeffClass::C1, CoeffClass::C2];

    pub fn name(&self) -> &'static str {
        match self {
            CoeffClass::C0 => "c0",
            CoeffClass::C1 => "c1",
            CoeffClass::C2 => "c2",
        }
    }

    pub fn get(&self, r: &CoefficientRecord) -> f64 {
        match self {
            CoeffClass::C0 => r.c0,
            CoeffClass::C1 => r.c1,
            CoeffClass::C2 => r.c2,
        }
    }
}

/// One row of the upper-level dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRecord {
    pub location_number: u32,
    pub calendar_day: NaiveDate,
    pub day_of_week: Weekday,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl CoefficientRecord {
    pub fn key(&self) -> LocationDay {
        LocationDay {
            location_number: self.location_number,
            calendar_day: self.calendar_day,
        }
    }

    pub fn day_of_week_index(&self) -> usize {
        self.day_of_week.num_days_from_monday() as usize
    }
}

/// A group that could not be fit, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitFailure {
    pub key: LocationDay,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitOptions {
    /// Shift inside the log: y_k = ln(count_k + epsilon).
    pub epsilon: f64,
    /// Minimum total items for a location-day to be considered usable.
    pub min_events: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            epsilon: 1.0,
            min_events: 5,
        }
    }
}

/// Orthonormal quadratic basis evaluated on a fixed grid of points.
#[derive(Debug, Clone)]
pub struct OrthoBasis {
    /// Basis columns, each of length K; orthonormal under (1/K) sum.
    cols: [Vec<f64>; 3],
}

impl OrthoBasis {
    /// Build {P0, P1, P2} on the given centered grid points by twice-applied
    /// modified Gram-Schmidt over the monomials {1, t, t^2}.
    pub fn on_grid(t: &[f64]) -> Result<Self> {
        let k = t.len();
        if k < 3 {
            return Err(Error::Data(format!(
                "orthonormal quadratic basis needs >= 3 grid points, got {k}"
            )));
        }
        let inner = |u: &[f64], v: &[f64]| -> f64 {
            u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / k as f64
        };
        let mut cols: [Vec<f64>; 3] = [
            vec![1.0; k],
            t.to_vec(),
            t.iter().map(|x| x * x).collect(),
        ];
        for j in 0..3 {
            for _pass in 0..2 {
                for i in 0..j {
                    let (head, tail) = cols.split_at_mut(j);
                    let proj = inner(&head[i], &tail[0]);
                    for (c, p) in tail[0].iter_mut().zip(&head[i]) {
                        *c -= proj * p;
                    }
                }
            }
            let norm = inner(&cols[j], &cols[j]).sqrt();
            if norm < 1e-12 {
                return Err(Error::Data(
                    "degenerate grid: monomials are linearly dependent".into(),
                ));
            }
            for c in cols[j].iter_mut() {
                *c /= norm;
            }
        }
        Ok(OrthoBasis { cols })
    }

    pub fn len(&self) -> usize {
        self.cols[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, a: usize) -> &[f64] {
        &self.cols[a]
    }

    /// Gram matrix under the normalized inner product; identity when the
    /// basis is exactly orthonormal.
    pub fn gram(&self) -> [[f64; 3]; 3] {
        let k = self.len() as f64;
        let mut g = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                g[a][b] = self.cols[a]
                    .iter()
                    .zip(&self.cols[b])
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
                    / k;
            }
        }
        g
    }

    /// OLS coefficients: with an orthonormal basis the least-squares solve
    /// is the projection c_a = <y, P_a>.
    pub fn project(&self, y: &[f64]) -> [f64; 3] {
        let k = self.len() as f64;
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = self.cols[a]
                .iter()
                .zip(y)
                .map(|(p, v)| p * v)
                .sum::<f64>()
                / k;
        }
        c
    }

    /// Value of the fitted quadratic at grid point `k`.
    pub fn eval(&self, coeffs: [f64; 3], k: usize) -> f64 {
        (0..3).map(|a| coeffs[a] * self.cols[a][k]).sum()
    }

    /// Exact basis coordinates of the monomial quadratic
    /// `m0 + m1 t + m2 t^2` restricted to this grid. The basis spans the
    /// quadratics, so this is a lossless change of coordinates.
    pub fn monomial_to_basis(&self, mono: [f64; 3], t: &[f64]) -> [f64; 3] {
        let y: Vec<f64> = t
            .iter()
            .map(|&x| mono[0] + mono[1] * x + mono[2] * x * x)
            .collect();
        self.project(&y)
    }
}

/// Fit the log-quadratic to one binned series.
pub fn fit_log_quadratic(series: &BinnedSeries, opts: &FitOptions) -> Result<CoefficientRecord> {
    let t = series.grid.centered_midpoints();
    if t.len() < 3 {
        return Err(Error::UnderdeterminedFit {
            location: series.key.location_number,
            day: series.key.calendar_day,
            usable_bins: t.len(),
        });
    }
    let basis = OrthoBasis::on_grid(&t)?;
    let y: Vec<f64> = series
        .counts
        .iter()
        .map(|&c| (c as f64 + opts.epsilon).ln())
        .collect();
    let c = basis.project(&y);
    Ok(CoefficientRecord {
        location_number: series.key.location_number,
        calendar_day: series.key.calendar_day,
        day_of_week: series.day_of_week,
        c0: c[0],
        c1: c[1],
        c2: c[2],
    })
}

/// Fit every usable group; failures are collected, not thrown.
/// `records.len() + failures.len() == groups.len()` always holds.
pub fn build_coefficient_dataset(
    groups: &BTreeMap<LocationDay, BinnedSeries>,
    opts: &FitOptions,
) -> (Vec<CoefficientRecord>, Vec<FitFailure>) {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (key, series) in groups {
        if series.total_items() < opts.min_events {
            failures.push(FitFailure {
                key: *key,
                reason: format!(
                    "below usability threshold: {} items < {}",
                    series.total_items(),
                    opts.min_events
                ),
            });
            continue;
        }
        match fit_log_quadratic(series, opts) {
            Ok(r) => records.push(r),
            Err(e) => failures.push(FitFailure {
                key: *key,
                reason: e.to_string(),
            }),
        }
    }
    (records, failures)
}

/// Result of rescaling one coefficient class for inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rescaled {
    pub values: Vec<f64>,
    pub scale_factor: f64,
    /// True when the mean was (near) zero and the absolute-mean fallback
    /// was used; then the scaled mean is not 1.
    pub fallback: bool,
}

impl Rescaled {
    pub fn unscale(&self, v: f64) -> f64 {
        v * self.scale_factor
    }
}

/// Rescale one coefficient class to have mean 1, putting c1/c2 onto a
/// unit scale before sampling.
pub fn rescale_for_inference(records: &[CoefficientRecord], class: CoeffClass) -> Result<Rescaled> {
    if records.is_empty() {
        return Err(Error::Data("rescale_for_inference: no records".into()));
    }
    let raw: Vec<f64> = records.iter().map(|r| class.get(r)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let tiny = 1e-12 * raw.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    if mean.abs() > tiny {
        Ok(Rescaled {
            values: raw.iter().map(|v| v / mean).collect(),
            scale_factor: mean,
            fallback: false,
        })
    } else {
        let nonzero: Vec<f64> = raw.iter().copied().filter(|v| *v != 0.0).collect();
        if nonzero.is_empty() {
            return Err(Error::Data(
                "rescale_for_inference: all values are exactly zero".into(),
            ));
        }
        let abs_mean = nonzero.iter().map(|v| v.abs()).sum::<f64>() / nonzero.len() as f64;
        Ok(Rescaled {
            values: raw.iter().map(|v| v / abs_mean).collect(),
            scale_factor: abs_mean,
            fallback: true,
        })
    }
}

const COEFFICIENT_HEADER: [&str; 6] = [
    "LocationNumber",
    "Day",
    "SalesDayName",
    "Coefficient0",
    "Coefficient1",
    "Coefficient2",
];

/// Write the upper-level dataset in the six-column coefficients schema.
pub fn write_coefficients<W: Write>(sink: W, records: &[CoefficientRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(COEFFICIENT_HEADER)?;
    for r in records {
        w.write_record([
            r.location_number.to_string(),
            r.calendar_day.to_string(),
            r.day_of_week.to_string(),
            r.c0.to_string(),
            r.c1.to_string(),
            r.c2.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_coefficients<R: Read>(source: R) -> Result<Vec<CoefficientRecord>> {
    let mut reader = csv::Reader::from_reader(source);
    let header = reader.headers()?.clone();
    if header.iter().ne(COEFFICIENT_HEADER) {
        return Err(Error::Data(format!(
            "coefficients header mismatch: got {:?}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let bad = |what: &str| Error::Data(format!("coefficients row {}: {what}", i + 1));
        let calendar_day: NaiveDate = row[1].parse().map_err(|_| bad("bad Day"))?;
        out.push(CoefficientRecord {
            location_number: row[0].parse().map_err(|_| bad("bad LocationNumber"))?,
            calendar_day,
            day_of_week: row[2].parse().map_err(|_| bad("bad SalesDayName"))?,
            c0: row[3].parse().map_err(|_| bad("bad Coefficient0"))?,
            c1: row[4].parse().map_err(|_| bad("bad Coefficient1"))?,
            c2: row[5].parse().map_err(|_| bad("bad Coefficient2"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::bin_day;
    use crate::timegrid::BinGrid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series_from_counts(counts: Vec<u64>) -> BinnedSeries {
        let grid = BinGrid::new(15 * counts.len() as u32, 15).unwrap();
        BinnedSeries {
            key: LocationDay {
                location_number: 1,
                calendar_day: "2024-01-01".parse().unwrap(),
            },
            day_of_week: Weekday::Mon,
            partial_tail: grid.has_partial_tail(),
            grid,
            counts,
        }
    }

    #[test]
    fn constant_counts_give_pure_c0() {
        let s = series_from_counts(vec![7; 60]);
        let r = fit_log_quadratic(&s, &FitOptions::default()).unwrap();
        assert!((r.c0 - 8.0f64.ln()).abs() < 1e-10);
        assert!(r.c1.abs() < 1e-10);
        assert!(r.c2.abs() < 1e-10);
    }

    #[test]
    fn log_linear_signal_has_zero_curvature() {
        // Exercised at the projection level where an exactly linear signal
        // can be constructed.
        let grid = BinGrid::new(900, 15).unwrap();
        let t = grid.centered_midpoints();
        let basis = OrthoBasis::on_grid(&t).unwrap();
        let y: Vec<f64> = t.iter().map(|&x| 0.7 - 1.3 * x).collect();
        let c = basis.project(&y);
        assert!(c[2].abs() < 1e-10, "c2 = {}", c[2]);
        // And a pure quadratic leaves a nonzero c2.
        let y2: Vec<f64> = t.iter().map(|&x| x * x).collect();
        assert!(basis.project(&y2)[2].abs() > 0.1);
    }

    #[test]
    fn gram_matrix_is_identity() {
        for k in [3usize, 4, 7, 60, 61] {
            let grid = BinGrid::new(15 * k as u32, 15).unwrap();
            let basis = OrthoBasis::on_grid(&grid.centered_midpoints()).unwrap();
            let g = basis.gram();
            for a in 0..3 {
                for b in 0..3 {
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!(
                        (g[a][b] - want).abs() < 1e-10,
                        "gram[{a}][{b}] = {} for K={k}",
                        g[a][b]
                    );
                }
            }
        }
    }

    #[test]
    fn too_few_bins_is_underdetermined() {
        let s = series_from_counts(vec![5, 5]);
        match fit_log_quadratic(&s, &FitOptions::default()) {
            Err(Error::UnderdeterminedFit { usable_bins, .. }) => assert_eq!(usable_bins, 2),
            other => panic!("expected UnderdeterminedFit, got {other:?}"),
        }
    }

    /// Dense normal-equations solve on the raw basis design matrix,
    /// independent of the projection path: solves (X'X) b = X'y by Gaussian
    /// elimination with partial pivoting.
    fn normal_equations_oracle(basis: &OrthoBasis, y: &[f64]) -> [f64; 3] {
        let k = basis.len();
        let mut a = [[0.0f64; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = (0..k).map(|r| basis.column(i)[r] * basis.column(j)[r]).sum();
            }
            a[i][3] = (0..k).map(|r| basis.column(i)[r] * y[r]).sum();
        }
        for col in 0..3 {
            let piv = (col..3)
                .max_by(|&p, &q| a[p][col].abs().partial_cmp(&a[q][col].abs()).unwrap())
                .unwrap();
            a.swap(col, piv);
            for row in 0..3 {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    for j in col..4 {
                        a[row][j] -= f * a[col][j];
                    }
                }
            }
        }
        [a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]]
    }

    #[test]
    fn projection_matches_normal_equations_on_1000_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..1000 {
            let k = rng.random_range(3usize..80);
            let grid = BinGrid::new(15 * k as u32, 15).unwrap();
            let basis = OrthoBasis::on_grid(&grid.centered_midpoints()).unwrap();
            let y: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c = basis.project(&y);
            let oracle = normal_equations_oracle(&basis, &y);
            for a in 0..3 {
                let scale = oracle[a].abs().max(1.0);
                assert!(
                    (c[a] - oracle[a]).abs() / scale < 1e-8,
                    "trial {trial}: c[{a}] = {} vs oracle {}",
                    c[a],
                    oracle[a]
                );
            }
        }
    }

    #[test]
    fn residual_gradient_vanishes_at_solution() {
        let grid = BinGrid::new(900, 15).unwrap();
        let basis = OrthoBasis::on_grid(&grid.centered_midpoints()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y: Vec<f64> = (0..60).map(|_| rng.random_range(0.5..4.0)).collect();
        let c = basis.project(&y);
        for a in 0..3 {
            let grad: f64 = (0..60)
                .map(|k| basis.column(a)[k] * (y[k] - basis.eval(c, k)))
                .sum();
            assert!(grad.abs() < 1e-10, "gradient[{a}] = {grad}");
        }
    }

    proptest! {
        /// Shift equivariance: y + delta moves c0 by delta (P0 is the
        /// constant 1) and leaves c1, c2 untouched.
        #[test]
        fn shift_equivariance(
            delta in -10.0f64..10.0,
            y in proptest::collection::vec(-4.0f64..4.0, 60)
        ) {
            let grid = BinGrid::new(900, 15).unwrap();
            let basis = OrthoBasis::on_grid(&grid.centered_midpoints()).unwrap();
            let base = basis.project(&y);
            let shifted: Vec<f64> = y.iter().map(|v| v + delta).collect();
            let moved = basis.project(&shifted);
            prop_assert!((moved[0] - base[0] - delta).abs() < 1e-10);
            prop_assert!((moved[1] - base[1]).abs() < 1e-10);
            prop_assert!((moved[2] - base[2]).abs() < 1e-10);
        }

        /// Round-trip of the rescaling.
        #[test]
        fn rescale_round_trips(values in proptest::collection::vec(0.1f64..10.0, 1..50)) {
            let records: Vec<CoefficientRecord> = values
                .iter()
                .map(|&v| CoefficientRecord {
                    location_number: 1,
                    calendar_day: "2024-01-01".parse().unwrap(),
                    day_of_week: Weekday::Mon,
                    c0: v,
                    c1: 0.0,
                    c2: 0.0,
                })
                .collect();
            let scaled = rescale_for_inference(&records, CoeffClass::C0).unwrap();
            for (s, raw) in scaled.values.iter().zip(&values) {
                prop_assert!((scaled.unscale(*s) - raw).abs() <= 1e-12 * raw.abs());
            }
        }
    }

    #[test]
    fn rescale_simple_and_fallback() {
        let mk = |c1: f64| CoefficientRecord {
            location_number: 1,
            calendar_day: "2024-01-01".parse().unwrap(),
            day_of_week: Weekday::Mon,
            c0: 2.0,
            c1,
            c2: 0.0,
        };
        let records = vec![mk(0.0), mk(0.0), mk(0.0)];
        let s = rescale_for_inference(&records, CoeffClass::C0).unwrap();
        assert_eq!(s.scale_factor, 2.0);
        assert_eq!(s.values, vec![1.0, 1.0, 1.0]);
        assert!(!s.fallback);
        // Mean-zero class falls back to the absolute mean of nonzeros.
        let records = vec![mk(-3.0), mk(3.0), mk(0.0)];
        let s = rescale_for_inference(&records, CoeffClass::C1).unwrap();
        assert!(s.fallback);
        assert_eq!(s.scale_factor, 3.0);
        // Tiny raw magnitudes still land on mean 1 (the usual c1/c2 regime).
        let records = vec![mk(1e-6), mk(3e-6), mk(2e-6)];
        let s = rescale_for_inference(&records, CoeffClass::C1).unwrap();
        let mean = s.values.iter().sum::<f64>() / 3.0;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn poisson_day_recovers_truth_within_3_se() {
        use crate::synthgen::{simulate_day, Curve};
        // High-rate day: about 50 items per 15-minute bin.
        let mono = [((50.0 / 15.0) as f64).ln(), 0.25, -0.4];
        let curve = Curve {
            c0: mono[0],
            c1: mono[1],
            c2: mono[2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let events = simulate_day(curve, 900, 0.0, 1.0, &mut rng);
        let records: Vec<crate::ingest::TransactionRecord> = events
            .iter()
            .map(|e| crate::ingest::TransactionRecord {
                location_number: 1,
                sales_day_name: Weekday::Mon,
                daily_minutes_open: 900,
                date_time_placed: "2024-01-01"
                    .parse::<NaiveDate>()
                    .unwrap()
                    .and_hms_opt(6, 0, 0)
                    .unwrap()
                    + chrono::TimeDelta::minutes(e.minute as i64),
                sales_as_minutes: e.minute as f64,
                quantity: e.quantity,
            })
            .collect();
        let series = bin_day(
            LocationDay {
                location_number: 1,
                calendar_day: "2024-01-01".parse().unwrap(),
            },
            900,
            15,
            &records,
        )
        .unwrap();
        let fitted = fit_log_quadratic(&series, &FitOptions::default()).unwrap();

        // Truth in basis coordinates: expected log bin count is the monomial
        // quadratic shifted by log of (bin width), projected onto the basis.
        let grid = BinGrid::new(900, 15).unwrap();
        let t = grid.centered_midpoints();
        let basis = OrthoBasis::on_grid(&t).unwrap();
        let truth = basis.monomial_to_basis([mono[0] + 15.0f64.ln(), mono[1], mono[2]], &t);

        // Residual-based standard error per coefficient: sigma_hat / sqrt(K).
        let y: Vec<f64> = series.counts.iter().map(|&c| (c as f64 + 1.0).ln()).collect();
        let c = basis.project(&y);
        let ss: f64 = (0..60).map(|k| (y[k] - basis.eval(c, k)).powi(2)).sum();
        let sigma = (ss / 57.0).sqrt();
        let se = sigma / 60.0f64.sqrt();
        let got = [fitted.c0, fitted.c1, fitted.c2];
        for a in 0..3 {
            assert!(
                (got[a] - truth[a]).abs() < 3.0 * se + 0.02,
                "coefficient {a}: {} vs truth {} (se {se})",
                got[a],
                truth[a]
            );
        }
    }

    #[test]
    fn dataset_build_accounts_for_every_group() {
        let mut groups = BTreeMap::new();
        for (i, counts) in [vec![7u64; 60], vec![0; 60], vec![1; 60]].into_iter().enumerate() {
            let mut s = series_from_counts(counts);
            s.key.location_number = i as u32 + 1;
            groups.insert(s.key, s);
        }
        let (records, failures) = build_coefficient_dataset(&groups, &FitOptions::default());
        assert_eq!(records.len() + failures.len(), groups.len());
        // The all-zero group fails the usability threshold.
        assert_eq!(failures.len(), 1);
        assert!(failures[0].reason.contains("usability"));

        // All-empty map of groups: zero records, all failures.
        let mut empties = BTreeMap::new();
        for i in 0..3u32 {
            let mut s = series_from_counts(vec![0; 60]);
            s.key.location_number = i + 1;
            empties.insert(s.key, s);
        }
        let (records, failures) = build_coefficient_dataset(&empties, &FitOptions::default());
        assert!(records.is_empty());
        assert_eq!(failures.len(), 3);
    }

    #[test]
    fn coefficient_csv_round_trips() {
        let records = vec![
            CoefficientRecord {
                location_number: 3,
                calendar_day: "2024-01-05".parse().unwrap(),
                day_of_week: Weekday::Fri,
                c0: 1.25,
                c1: -0.003,
                c2: 1e-6,
            },
            CoefficientRecord {
                location_number: 4,
                calendar_day: "2024-01-06".parse().unwrap(),
                day_of_week: Weekday::Sat,
                c0: 0.5,
                c1: 0.0,
                c2: -2.5e-7,
            },
        ];
        let mut buf = Vec::new();
        write_coefficients(&mut buf, &records).unwrap();
        assert_eq!(read_coefficients(buf.as_slice()).unwrap(), records);
    }
}
