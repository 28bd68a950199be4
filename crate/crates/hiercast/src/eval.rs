//! Evaluation protocol: random half split, test-on-train sanity check,
//! group-mean baseline comparison, bias/RMSE per coefficient and grouping,
//! variance decomposition and R-squared, and plot-data emission.
//!
//! The hierarchical model and the baseline are both fit/averaged on the
//! train half and scored against hold-out group means. Predictions for a
//! group marginalize the other grouping by omitting its (mean zero) effect.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hier::{HierData, ParamSummary};
use crate::ingest::{BinnedSeries, LocationDay};
use crate::localfit::{CoeffClass, CoefficientRecord};

pub const N_WEEKDAYS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Location,
    DayOfWeek,
}

impl Grouping {
    pub fn name(&self) -> &'static str {
        match self {
            Grouping::Location => "Location",
            Grouping::DayOfWeek => "Day-Of-Week",
        }
    }
}

/// Per-record train/test labels. The label is a pure function of the
/// record key and the seed, i.i.d. Bernoulli(1/2) across keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub labels: BTreeMap<LocationDay, Split>,
}

impl SplitAssignment {
    pub fn label(&self, key: &LocationDay) -> Option<Split> {
        self.labels.get(key).copied()
    }

    pub fn partition<'a>(
        &self,
        records: &'a [CoefficientRecord],
    ) -> (Vec<&'a CoefficientRecord>, Vec<&'a CoefficientRecord>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for r in records {
            match self.labels.get(&r.key()) {
                Some(Split::Train) => train.push(r),
                _ => test.push(r),
            }
        }
        (train, test)
    }
}

fn key_bit(key: &LocationDay, seed: u64) -> bool {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.location_number.to_le_bytes());
    h.update(key.calendar_day.to_string().as_bytes());
    h.finalize()[0] & 1 == 0
}

/// Assign each record to train or test with probability 1/2 each.
pub fn split(records: &[CoefficientRecord], seed: u64) -> SplitAssignment {
    let labels = records
        .iter()
        .map(|r| {
            let key = r.key();
            let label = if key_bit(&key, seed) {
                Split::Train
            } else {
                Split::Test
            };
            (key, label)
        })
        .collect();
    SplitAssignment { seed, labels }
}

/// Sorted unique location ids defining the model's location indexing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocationIndex {
    pub ids: Vec<u32>,
}

impl LocationIndex {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a CoefficientRecord>) -> Self {
        let mut ids: Vec<u32> = records.into_iter().map(|r| r.location_number).collect();
        ids.sort_unstable();
        ids.dedup();
        LocationIndex { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }
}

/// Assemble the sampler input for one coefficient class. `values` must be
/// aligned with `records` (typically the rescaled coefficients).
pub fn build_hier_data(
    records: &[&CoefficientRecord],
    values: &[f64],
    locations: &LocationIndex,
) -> Result<HierData> {
    if records.len() != values.len() {
        return Err(Error::Data(format!(
            "records ({}) and values ({}) must align",
            records.len(),
            values.len()
        )));
    }
    let mut data = HierData {
        n_days: N_WEEKDAYS,
        n_locations: locations.len(),
        day_index: Vec::with_capacity(records.len()),
        location_index: Vec::with_capacity(records.len()),
        y: values.to_vec(),
    };
    for r in records {
        data.day_index.push(r.day_of_week_index());
        data.location_index.push(locations.index_of(r.location_number).ok_or_else(|| {
            Error::Data(format!(
                "location {} missing from the model's location index",
                r.location_number
            ))
        })?);
    }
    data.validate()?;
    Ok(data)
}

fn summary_mean(summary: &[ParamSummary], name: &str) -> Result<f64> {
    summary
        .iter()
        .find(|r| r.name == name)
        .map(|r| r.mean)
        .ok_or_else(|| Error::Data(format!("parameter {name} not in summary")))
}

/// Hierarchical prediction for one upper-level unit: (mu + z_group) scaled
/// back to the raw coefficient scale.
pub fn predict_group(
    summary: &[ParamSummary],
    grouping: Grouping,
    group_index: usize,
    scale_factor: f64,
) -> Result<f64> {
    let mu = summary_mean(summary, "mu")?;
    let z_name = match grouping {
        Grouping::DayOfWeek => format!("z_d[{group_index}]"),
        Grouping::Location => format!("z_j[{group_index}]"),
    };
    let z = summary_mean(summary, &z_name)
        .map_err(|_| Error::Data(format!("unknown group id {group_index} for {grouping:?}")))?;
    Ok((mu + z) * scale_factor)
}

/// Arithmetic mean and count of one coefficient per group, keyed by model
/// index. Locations absent from the index are reported back, not dropped
/// silently.
pub fn group_means(
    records: &[&CoefficientRecord],
    class: CoeffClass,
    grouping: Grouping,
    locations: &LocationIndex,
) -> (BTreeMap<usize, (f64, usize)>, Vec<u32>) {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut excluded = Vec::new();
    for r in records {
        let idx = match grouping {
            Grouping::DayOfWeek => Some(r.day_of_week_index()),
            Grouping::Location => locations.index_of(r.location_number),
        };
        match idx {
            Some(i) => {
                let e = acc.entry(i).or_insert((0.0, 0));
                e.0 += class.get(r);
                e.1 += 1;
            }
            None => excluded.push(r.location_number),
        }
    }
    excluded.sort_unstable();
    excluded.dedup();
    let means = acc
        .into_iter()
        .map(|(k, (sum, n))| (k, (sum / n as f64, n)))
        .collect();
    (means, excluded)
}

/// Group-mean baseline predictor for one unit.
pub fn baseline_group_mean(
    records: &[&CoefficientRecord],
    class: CoeffClass,
    grouping: Grouping,
    group_index: usize,
    locations: &LocationIndex,
) -> Result<f64> {
    let (means, _) = group_means(records, class, grouping, locations);
    means
        .get(&group_index)
        .map(|(m, _)| *m)
        .ok_or_else(|| Error::Data(format!("group {group_index} empty in the given set")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub bias: f64,
    pub rmse: f64,
}

/// Bias = mean(pred) - mean(actual); RMSE = sqrt(mean squared deviation).
pub fn score(predictions: &[f64], actuals: &[f64]) -> Result<Score> {
    if predictions.len() != actuals.len() || predictions.is_empty() {
        return Err(Error::Data(format!(
            "score needs aligned nonempty vectors, got {} and {}",
            predictions.len(),
            actuals.len()
        )));
    }
    let n = predictions.len() as f64;
    let bias = predictions.iter().sum::<f64>() / n - actuals.iter().sum::<f64>() / n;
    let mse = predictions
        .iter()
        .zip(actuals)
        .map(|(p, a)| (p - a).powi(2))
        .sum::<f64>()
        / n;
    Ok(Score {
        bias,
        rmse: mse.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    pub s_d: f64,
    pub s_j: f64,
    pub s_eps: f64,
    /// sqrt(s_d^2 + s_j^2 + s_eps^2).
    pub combined: f64,
    /// Sample SD of the observations the model was fit to.
    pub sigma_y: f64,
    /// 1 - s_eps^2 / sigma_y^2.
    pub r_squared: f64,
}

/// Analysis-of-variance style check: the combined scale should closely
/// approximate the observed y spread.
pub fn variance_decomposition(summary: &[ParamSummary], y: &[f64]) -> Result<VarianceDecomposition> {
    let s_d = summary_mean(summary, "s_d")?;
    let s_j = summary_mean(summary, "s_j")?;
    let s_eps = summary_mean(summary, "s_eps")?;
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sigma_y = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(VarianceDecomposition {
        s_d,
        s_j,
        s_eps,
        combined: (s_d * s_d + s_j * s_j + s_eps * s_eps).sqrt(),
        sigma_y,
        r_squared: 1.0 - (s_eps * s_eps) / (sigma_y * sigma_y),
    })
}

/// One fitted coefficient-class model, as needed by the scorer.
#[derive(Debug, Clone)]
pub struct FittedClass {
    pub class: CoeffClass,
    pub summary: Vec<ParamSummary>,
    pub scale_factor: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Score per test record instead of per group mean.
    pub per_record: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub coefficient: String,
    pub grouping: String,
    pub baseline_bias: f64,
    pub baseline_rmse: f64,
    pub hier_bias: f64,
    pub hier_rmse: f64,
    pub n_groups: usize,
    /// Location ids present in test but unusable (absent from train).
    pub excluded: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Sanity check: training units scored against themselves, per class.
    pub test_on_train: BTreeMap<String, Score>,
    pub variance: BTreeMap<String, VarianceDecomposition>,
}

fn score_grouping(
    predictor_records: &[&CoefficientRecord],
    actual_records: &[&CoefficientRecord],
    fitted: &FittedClass,
    grouping: Grouping,
    locations: &LocationIndex,
    opts: EvalOptions,
) -> Result<EvalRow> {
    let (actual_means, mut excluded) =
        group_means(actual_records, fitted.class, grouping, locations);
    let (baseline_means, _) = group_means(predictor_records, fitted.class, grouping, locations);

    let mut baseline_pred = Vec::new();
    let mut hier_pred = Vec::new();
    let mut actual = Vec::new();
    for (&idx, &(actual_mean, n_actual)) in &actual_means {
        let Some(&(base, _)) = baseline_means.get(&idx) else {
            // Group never seen by the predictors; report and skip.
            if grouping == Grouping::Location {
                excluded.push(locations.ids[idx]);
            }
            continue;
        };
        let hier = predict_group(&fitted.summary, grouping, idx, fitted.scale_factor)?;
        if opts.per_record {
            let reps = n_actual;
            for r in actual_records {
                let matches = match grouping {
                    Grouping::DayOfWeek => r.day_of_week_index() == idx,
                    Grouping::Location => locations.index_of(r.location_number) == Some(idx),
                };
                if matches {
                    baseline_pred.push(base);
                    hier_pred.push(hier);
                    actual.push(fitted.class.get(r));
                }
            }
            debug_assert!(reps > 0);
        } else {
            baseline_pred.push(base);
            hier_pred.push(hier);
            actual.push(actual_mean);
        }
    }
    excluded.sort_unstable();
    excluded.dedup();
    let n_groups = baseline_pred.len();
    let b = score(&baseline_pred, &actual)?;
    let h = score(&hier_pred, &actual)?;
    Ok(EvalRow {
        coefficient: fitted.class.name().to_string(),
        grouping: grouping.name().to_string(),
        baseline_bias: b.bias,
        baseline_rmse: b.rmse,
        hier_bias: h.bias,
        hier_rmse: h.rmse,
        n_groups: if opts.per_record {
            actual_means.len()
        } else {
            n_groups
        },
        excluded,
    })
}

/// Full protocol over the three coefficient classes and both groupings.
pub fn run_evaluation(
    train: &[&CoefficientRecord],
    test: &[&CoefficientRecord],
    fitted: &[FittedClass],
    locations: &LocationIndex,
    opts: EvalOptions,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    let mut test_on_train = BTreeMap::new();
    let mut variance = BTreeMap::new();
    for f in fitted {
        for grouping in [Grouping::Location, Grouping::DayOfWeek] {
            rows.push(score_grouping(train, test, f, grouping, locations, opts)?);
        }
        // Test-on-train: predict the training units from the model that was
        // trained on them; errors should be negligible.
        let tot = score_grouping(
            train,
            train,
            f,
            Grouping::Location,
            locations,
            EvalOptions::default(),
        )?;
        test_on_train.insert(
            f.class.name().to_string(),
            Score {
                bias: tot.hier_bias,
                rmse: tot.hier_rmse,
            },
        );
        let y_scaled: Vec<f64> = train
            .iter()
            .map(|r| f.class.get(r) / f.scale_factor)
            .collect();
        variance.insert(
            f.class.name().to_string(),
            variance_decomposition(&f.summary, &y_scaled)?,
        );
    }
    Ok(EvalReport {
        rows,
        test_on_train,
        variance,
    })
}

/// RMSE comparison table, one row per coefficient x grouping.
pub fn write_table3<W: Write>(sink: W, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["Coefficient", "Group", "Average", "Hierarchy"])?;
    for row in &report.rows {
        w.write_record([
            row.coefficient.clone(),
            row.grouping.clone(),
            row.baseline_rmse.to_string(),
            row.hier_rmse.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Plot data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    DailyFit,
    BoxplotByGroup,
    PredVsActual,
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "daily_fit" => Ok(PlotKind::DailyFit),
            "boxplot_by_group" => Ok(PlotKind::BoxplotByGroup),
            "pred_vs_actual" => Ok(PlotKind::PredVsActual),
            other => Err(Error::Config(format!("unknown plot kind {other:?}"))),
        }
    }
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

/// Binned counts plus the fitted curve sampled at bin midpoints, enough to
/// regenerate the one-day figure. `coeffs` are basis coefficients from the
/// local fit; `epsilon` is the log shift it used.
pub fn write_daily_fit<W: Write>(
    sink: W,
    series: &BinnedSeries,
    coeffs: [f64; 3],
    epsilon: f64,
) -> Result<()> {
    let t = series.grid.centered_midpoints();
    let basis = crate::localfit::OrthoBasis::on_grid(&t)?;
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["bin_index", "midpoint_minute", "count", "fitted_count"])?;
    for k in 0..series.counts.len() {
        let fitted = basis.eval(coeffs, k).exp() - epsilon;
        w.write_record([
            k.to_string(),
            series.grid.midpoint(k).to_string(),
            series.counts[k].to_string(),
            fitted.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotRow {
    pub group: String,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Per-group quartiles of one coefficient class.
pub fn boxplot_rows(
    records: &[&CoefficientRecord],
    class: CoeffClass,
    grouping: Grouping,
) -> Vec<BoxplotRow> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        let key = match grouping {
            Grouping::Location => format!("{:03}", r.location_number),
            Grouping::DayOfWeek => format!("{}-{}", r.day_of_week_index(), r.day_of_week),
        };
        groups.entry(key).or_default().push(class.get(r));
    }
    groups
        .into_iter()
        .map(|(group, mut vals)| {
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            BoxplotRow {
                group,
                n: vals.len(),
                min: vals[0],
                q1: quantile(&vals, 0.25),
                median: quantile(&vals, 0.5),
                q3: quantile(&vals, 0.75),
                max: *vals.last().unwrap(),
            }
        })
        .collect()
}

pub fn write_boxplot<W: Write>(sink: W, rows: &[BoxplotRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["group", "n", "min", "q1", "median", "q3", "max"])?;
    for r in rows {
        w.write_record([
            r.group.clone(),
            r.n.to_string(),
            r.min.to_string(),
            r.q1.to_string(),
            r.median.to_string(),
            r.q3.to_string(),
            r.max.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Prediction/actual pairs; the identity line is the reference.
pub fn write_pred_vs_actual<W: Write>(
    sink: W,
    pairs: &[(String, f64, f64)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["group", "predicted", "actual"])?;
    for (group, pred, actual) in pairs {
        w.write_record([group.clone(), pred.to_string(), actual.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// The pairs behind the pred-vs-actual figure for one class and grouping.
pub fn pred_vs_actual_pairs(
    train: &[&CoefficientRecord],
    test: &[&CoefficientRecord],
    fitted: &FittedClass,
    grouping: Grouping,
    locations: &LocationIndex,
) -> Result<Vec<(String, f64, f64)>> {
    let _ = train;
    let (actual_means, _) = group_means(test, fitted.class, grouping, locations);
    let mut out = Vec::new();
    for (&idx, &(actual, _)) in &actual_means {
        let Ok(pred) = predict_group(&fitted.summary, grouping, idx, fitted.scale_factor) else {
            continue;
        };
        let name = match grouping {
            Grouping::Location => locations.ids[idx].to_string(),
            Grouping::DayOfWeek => idx.to_string(),
        };
        out.push((name, pred, actual));
    }
    Ok(out)
}
