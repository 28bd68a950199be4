//! Stage orchestration and on-disk artifact layout.
//!
//! Each stage reads its inputs from `out_dir`, writes its outputs there,
//! and records what it produced in `manifest.json` (config hash plus a
//! sha256 digest per artifact) so a run can be replayed and compared
//! byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{
    self, boxplot_rows, run_evaluation, EvalOptions, FittedClass, Grouping, LocationIndex, Split,
    SplitAssignment,
};
use crate::hier::{diagnostics, posterior_summary, run_mcmc, write_draws, ParamSummary};
use crate::ingest::{
    group_by_location_day, parse_transactions, write_binned, write_rejections, write_transactions,
    LocationDay, ParseOptions,
};
use crate::localfit::{
    build_coefficient_dataset, read_coefficients, rescale_for_inference, write_coefficients,
    CoeffClass, CoefficientRecord,
};
use crate::synthgen::generate_dataset;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRANSACTIONS_FILE: &str = "transactions.csv";
pub const REJECTIONS_FILE: &str = "rejections.csv";
pub const BINNED_FILE: &str = "binned.csv";
pub const COEFFICIENTS_FILE: &str = "coefficients.csv";
pub const FIT_FAILURES_FILE: &str = "fit_failures.csv";
pub const DAILY_FIT_FILE: &str = "daily_fit.csv";
pub const SPLIT_FILE: &str = "split.csv";
pub const LOCATIONS_FILE: &str = "locations.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const TABLE3_FILE: &str = "table3.csv";

pub fn draws_file(class: CoeffClass) -> String {
    format!("draws_{}.csv", class.name().to_lowercase())
}

pub fn diagnostics_file(class: CoeffClass) -> String {
    format!("diagnostics_{}.json", class.name().to_lowercase())
}

pub fn summary_file(class: CoeffClass) -> String {
    format!("summary_{}.json", class.name().to_lowercase())
}

pub fn scale_file(class: CoeffClass) -> String {
    format!("scale_{}.json", class.name().to_lowercase())
}

/// Replay record: the configuration hash plus a digest of every artifact.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    /// Stage name -> config hash it ran under.
    pub stages: BTreeMap<String, String>,
    /// Artifact file name -> sha256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

/// Hash of the canonical JSON form of the configuration.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

impl Manifest {
    pub fn load(out_dir: &Path) -> Result<Manifest> {
        let path = out_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("corrupt {MANIFEST_FILE}: {e}")))
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(out_dir.join(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.flush()?;
        Ok(())
    }

    fn record_stage(&mut self, cfg: &PipelineConfig, stage: &str) {
        let hash = config_hash(cfg);
        self.config_hash = hash.clone();
        self.seed = cfg.seed;
        self.stages.insert(stage.to_string(), hash);
    }

    fn record_artifact(&mut self, out_dir: &Path, name: &str) -> Result<()> {
        let digest = sha256_file(&out_dir.join(name))?;
        self.artifacts.insert(name.to_string(), digest);
        Ok(())
    }
}

fn create(out_dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(out_dir.join(name))?))
}

/// Open a stage input, naming the stage that produces it when absent.
fn open_input(out_dir: &Path, name: &str, produced_by: &str) -> Result<BufReader<File>> {
    let path = out_dir.join(name);
    if !path.exists() {
        return Err(Error::Data(format!(
            "missing input {name} in {}; run the `{produced_by}` command first",
            out_dir.display()
        )));
    }
    Ok(BufReader::new(File::open(path)?))
}

fn ensure_out_dir(out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    Ok(())
}

/// Generate the synthetic transaction stream into `transactions.csv`.
pub fn cmd_generate(cfg: &PipelineConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    ensure_out_dir(out_dir)?;
    let gt = cfg.truth.ground_truth(cfg.n_locations, cfg.seed)?;
    let records = generate_dataset(&cfg.sim_config(), &gt)?;
    write_transactions(create(out_dir, TRANSACTIONS_FILE)?, &records)?;
    let mut manifest = Manifest::load(out_dir)?;
    manifest.record_stage(cfg, "generate");
    manifest.record_artifact(out_dir, TRANSACTIONS_FILE)?;
    manifest.save(out_dir)?;
    println!(
        "generate: {} transactions across {} locations x {} days -> {}",
        records.len(),
        cfg.n_locations,
        cfg.n_days,
        out_dir.join(TRANSACTIONS_FILE).display()
    );
    Ok(())
}

/// Parse and bin `transactions.csv` into `binned.csv` + `rejections.csv`.
pub fn cmd_bin(cfg: &PipelineConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    ensure_out_dir(out_dir)?;
    let source = open_input(out_dir, TRANSACTIONS_FILE, "generate")?;
    let outcome = parse_transactions(source, ParseOptions::default())?;
    let groups = group_by_location_day(&outcome.records, cfg.bin_width)?;
    write_binned(create(out_dir, BINNED_FILE)?, &groups)?;
    write_rejections(create(out_dir, REJECTIONS_FILE)?, &outcome.rejections)?;
    let mut manifest = Manifest::load(out_dir)?;
    manifest.record_stage(cfg, "bin");
    manifest.record_artifact(out_dir, BINNED_FILE)?;
    manifest.record_artifact(out_dir, REJECTIONS_FILE)?;
    manifest.save(out_dir)?;
    println!(
        "bin: {} rows parsed, {} rejected, {} location-day groups",
        outcome.total_rows(),
        outcome.rejections.len(),
        groups.len()
    );
    Ok(())
}

/// Fit the local log-quadratics, producing the coefficient dataset plus the
/// single-day fit sampled for plotting.
pub fn cmd_fit(cfg: &PipelineConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    ensure_out_dir(out_dir)?;
    let groups = crate::ingest::read_binned(open_input(out_dir, BINNED_FILE, "bin")?)?;
    let (records, failures) = build_coefficient_dataset(&groups, &cfg.fit_options());
    if records.is_empty() {
        return Err(Error::Data("no location-day produced a usable fit".into()));
    }
    write_coefficients(create(out_dir, COEFFICIENTS_FILE)?, &records)?;
    {
        let mut w = csv::Writer::from_writer(create(out_dir, FIT_FAILURES_FILE)?);
        w.write_record(["LocationNumber", "Day", "Reason"])?;
        for f in &failures {
            w.write_record([
                f.key.location_number.to_string(),
                f.key.calendar_day.to_string(),
                f.reason.clone(),
            ])?;
        }
        w.flush()?;
    }
    // Plot data for the busiest day on record.
    let busiest = groups
        .values()
        .max_by_key(|s| s.total_items())
        .expect("non-empty groups");
    let rec = records
        .iter()
        .find(|r| r.key() == busiest.key)
        .or_else(|| records.first())
        .expect("at least one record");
    let series = &groups[&rec.key()];
    eval::write_daily_fit(
        create(out_dir, DAILY_FIT_FILE)?,
        series,
        [rec.c0, rec.c1, rec.c2],
        cfg.epsilon,
    )?;
    let mut manifest = Manifest::load(out_dir)?;
    manifest.record_stage(cfg, "fit");
    manifest.record_artifact(out_dir, COEFFICIENTS_FILE)?;
    manifest.record_artifact(out_dir, FIT_FAILURES_FILE)?;
    manifest.record_artifact(out_dir, DAILY_FIT_FILE)?;
    manifest.save(out_dir)?;
    println!(
        "fit: {} coefficient rows, {} groups skipped",
        records.len(),
        failures.len()
    );
    Ok(())
}

fn write_split(out_dir: &Path, assignment: &SplitAssignment) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(out_dir, SPLIT_FILE)?);
    w.write_record(["LocationNumber", "Day", "Label"])?;
    for (key, label) in &assignment.labels {
        let label = match label {
            Split::Train => "train",
            Split::Test => "test",
        };
        w.write_record([
            key.location_number.to_string(),
            key.calendar_day.to_string(),
            label.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_split(out_dir: &Path, seed: u64) -> Result<SplitAssignment> {
    let mut reader = csv::Reader::from_reader(open_input(out_dir, SPLIT_FILE, "infer")?);
    let mut labels = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let bad = |what: &str| Error::Data(format!("split row {}: {what}", i + 1));
        let key = LocationDay {
            location_number: row[0].parse().map_err(|_| bad("bad LocationNumber"))?,
            calendar_day: row[1].parse().map_err(|_| bad("bad Day"))?,
        };
        let label = match &row[2] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(bad(&format!("bad Label {other:?}"))),
        };
        labels.insert(key, label);
    }
    Ok(SplitAssignment { seed, labels })
}

/// Split, rescale, and sample the posterior for each coefficient class.
pub fn cmd_infer(cfg: &PipelineConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    ensure_out_dir(out_dir)?;
    let records = read_coefficients(open_input(out_dir, COEFFICIENTS_FILE, "fit")?)?;
    let assignment = eval::split(&records, cfg.split_seed());
    write_split(out_dir, &assignment)?;
    let (train, _test) = assignment.partition(&records);
    if train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let locations = LocationIndex::from_records(train.iter().copied());
    {
        let mut f = create(out_dir, LOCATIONS_FILE)?;
        serde_json::to_writer_pretty(&mut f, &locations)?;
        f.flush()?;
    }

    let train_owned: Vec<CoefficientRecord> = train.iter().map(|r| (*r).clone()).collect();
    let mut manifest = Manifest::load(out_dir)?;
    manifest.record_stage(cfg, "infer");
    manifest.record_artifact(out_dir, SPLIT_FILE)?;
    manifest.record_artifact(out_dir, LOCATIONS_FILE)?;

    for class in CoeffClass::ALL {
        let rescaled = rescale_for_inference(&train_owned, class)?;
        let data = eval::build_hier_data(&train, &rescaled.values, &locations)?;
        let draws = run_mcmc(&data, &cfg.sampler_config())?;
        let summary = posterior_summary(&draws)?;
        let report = diagnostics(&draws)?;

        write_draws(create(out_dir, &draws_file(class))?, &draws)?;
        let mut f = create(out_dir, &summary_file(class))?;
        serde_json::to_writer_pretty(&mut f, &summary)?;
        f.flush()?;
        let mut f = create(out_dir, &diagnostics_file(class))?;
        serde_json::to_writer_pretty(&mut f, &report)?;
        f.flush()?;
        let mut f = create(out_dir, &scale_file(class))?;
        serde_json::to_writer_pretty(
            &mut f,
            &serde_json::json!({
                "class": class.name(),
                "scale_factor": rescaled.scale_factor,
                "fallback": rescaled.fallback,
            }),
        )?;
        f.flush()?;

        manifest.record_artifact(out_dir, &draws_file(class))?;
        manifest.record_artifact(out_dir, &summary_file(class))?;
        manifest.record_artifact(out_dir, &diagnostics_file(class))?;
        manifest.record_artifact(out_dir, &scale_file(class))?;

        println!(
            "infer[{}]: n={} max R-hat {:.4}{}",
            class.name(),
            data.len(),
            report.max_rhat,
            if report.converged() {
                String::new()
            } else {
                format!(" ({} flagged)", report.flagged.len())
            }
        );
    }
    manifest.save(out_dir)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ScaleRecord {
    #[allow(dead_code)]
    class: String,
    scale_factor: f64,
    #[allow(dead_code)]
    fallback: bool,
}

fn load_fitted(out_dir: &Path) -> Result<Vec<FittedClass>> {
    let mut out = Vec::new();
    for class in CoeffClass::ALL {
        let summary: Vec<ParamSummary> =
            serde_json::from_reader(open_input(out_dir, &summary_file(class), "infer")?)
                .map_err(|e| Error::Data(format!("bad {}: {e}", summary_file(class))))?;
        let scale: ScaleRecord =
            serde_json::from_reader(open_input(out_dir, &scale_file(class), "infer")?)
                .map_err(|e| Error::Data(format!("bad {}: {e}", scale_file(class))))?;
        out.push(FittedClass {
            class,
            summary,
            scale_factor: scale.scale_factor,
        });
    }
    Ok(out)
}

/// Score the fitted models on the hold-out half and emit the report,
/// comparison table, and plot data.
pub fn cmd_eval(cfg: &PipelineConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    ensure_out_dir(out_dir)?;
    let records = read_coefficients(open_input(out_dir, COEFFICIENTS_FILE, "fit")?)?;
    let assignment = read_split(out_dir, cfg.split_seed())?;
    let locations: LocationIndex =
        serde_json::from_reader(open_input(out_dir, LOCATIONS_FILE, "infer")?)
            .map_err(|e| Error::Data(format!("bad {LOCATIONS_FILE}: {e}")))?;
    let fitted = load_fitted(out_dir)?;
    let (train, test) = assignment.partition(&records);
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let report = run_evaluation(&train, &test, &fitted, &locations, EvalOptions::default())?;

    let mut f = create(out_dir, EVAL_REPORT_FILE)?;
    serde_json::to_writer_pretty(&mut f, &report)?;
    f.flush()?;
    eval::write_table3(create(out_dir, TABLE3_FILE)?, &report)?;

    let mut manifest = Manifest::load(out_dir)?;
    manifest.record_stage(cfg, "eval");
    manifest.record_artifact(out_dir, EVAL_REPORT_FILE)?;
    manifest.record_artifact(out_dir, TABLE3_FILE)?;

    // Plot data: coefficient spread by group, and hold-out pred vs actual.
    let all_refs: Vec<&CoefficientRecord> = records.iter().collect();
    for (grouping, tag) in [(Grouping::Location, "location"), (Grouping::DayOfWeek, "day")] {
        let name = format!("boxplot_c0_by_{tag}.csv");
        let rows = boxplot_rows(&all_refs, CoeffClass::C0, grouping);
        eval::write_boxplot(create(out_dir, &name)?, &rows)?;
        manifest.record_artifact(out_dir, &name)?;
    }
    for fc in &fitted {
        let name = format!(
            "pred_vs_actual_{}_location.csv",
            fc.class.name().to_lowercase()
        );
        let pairs =
            eval::pred_vs_actual_pairs(&train, &test, fc, Grouping::Location, &locations)?;
        eval::write_pred_vs_actual(create(out_dir, &name)?, &pairs)?;
        manifest.record_artifact(out_dir, &name)?;
    }
    manifest.save(out_dir)?;

    for row in &report.rows {
        println!(
            "eval[{} by {}]: baseline RMSE {:.4} vs hierarchy RMSE {:.4} ({} groups)",
            row.coefficient, row.grouping, row.baseline_rmse, row.hier_rmse, row.n_groups
        );
    }
    Ok(())
}

/// Run every stage in order against one output directory.
pub fn cmd_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<()> {
    cmd_generate(cfg, out_dir)?;
    cmd_bin(cfg, out_dir)?;
    cmd_fit(cfg, out_dir)?;
    cmd_infer(cfg, out_dir)?;
    cmd_eval(cfg, out_dir)?;
    Ok(())
}

/// Resolve the output directory, defaulting to `./out`.
pub fn resolve_out_dir(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from("out"))
}
