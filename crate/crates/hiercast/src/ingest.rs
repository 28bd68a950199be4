//! Parsing, validation, and 15-minute binning of sales transaction streams.
//!
//! Input is the six-column transaction CSV
//! (`LocationNumber,SalesDayName,DailyMinutesOpen,DateTimePlaced,SalesAsMinutes,Quantity`).
//! Every row either yields a valid record or a structured per-row rejection;
//! nothing is dropped silently. Binning preserves zero-count intervals and
//! conserves total item quantity exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timegrid::BinGrid;

/// Header of the transaction CSV, in order.
pub const TRANSACTION_HEADER: [&str; 6] = [
    "LocationNumber",
    "SalesDayName",
    "DailyMinutesOpen",
    "DateTimePlaced",
    "SalesAsMinutes",
    "Quantity",
];

/// One sales event; the bottom level of the hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct TransactionRecord {
    pub location_number: u32,
    pub sales_day_name: Weekday,
    pub daily_minutes_open: u32,
    pub date_time_placed: NaiveDateTime,
    pub sales_as_minutes: f64,
    pub quantity: u32,
}

/// Key identifying one store's one calendar day of operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LocationDay {
    pub location_number: u32,
    pub calendar_day: NaiveDate,
}

/// Fixed-grid counts for one location-day. Zero bins are present, never
/// dropped; `sum(counts)` equals the total item quantity of the day.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinnedSeries {
    pub key: LocationDay,
    pub day_of_week: Weekday,
    pub grid: BinGrid,
    pub counts: Vec<u64>,
    /// True when the last bin spans fewer minutes than the rest.
    pub partial_tail: bool,
}

impl BinnedSeries {
    pub fn total_items(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn day_of_week_index(&self) -> usize {
        self.day_of_week.num_days_from_monday() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowRejection {
    /// 1-based data row number (header not counted).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub records: Vec<TransactionRecord>,
    pub rejections: Vec<RowRejection>,
}

impl ParseOutcome {
    pub fn total_rows(&self) -> usize {
        self.records.len() + self.rejections.len()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Accept the expected header under case-insensitive comparison.
    pub case_insensitive_header: bool,
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M"))
        .ok()
}

fn parse_row(fields: &csv::StringRecord) -> std::result::Result<TransactionRecord, String> {
    if fields.len() != TRANSACTION_HEADER.len() {
        return Err(format!(
            "expected {} fields, got {}",
            TRANSACTION_HEADER.len(),
            fields.len()
        ));
    }
    let location_number: u32 = fields[0]
        .trim()
        .parse()
        .map_err(|_| format!("invalid LocationNumber {:?}", &fields[0]))?;
    let sales_day_name = Weekday::from_str(fields[1].trim())
        .map_err(|_| format!("unknown day name {:?}", &fields[1]))?;
    let daily_minutes_open: u32 = fields[2]
        .trim()
        .parse()
        .map_err(|_| format!("invalid DailyMinutesOpen {:?}", &fields[2]))?;
    if daily_minutes_open < 1 {
        return Err("DailyMinutesOpen >= 1 violated".into());
    }
    let date_time_placed = parse_timestamp(fields[3].trim())
        .ok_or_else(|| format!("malformed timestamp {:?}", &fields[3]))?;
    let sales_as_minutes: f64 = fields[4]
        .trim()
        .parse()
        .map_err(|_| format!("invalid SalesAsMinutes {:?}", &fields[4]))?;
    if !(0.0..daily_minutes_open as f64).contains(&sales_as_minutes) {
        return Err(format!(
            "SalesAsMinutes {sales_as_minutes} outside [0, {daily_minutes_open})"
        ));
    }
    let quantity: i64 = fields[5]
        .trim()
        .parse()
        .map_err(|_| format!("invalid Quantity {:?}", &fields[5]))?;
    if quantity < 1 {
        return Err("quantity >= 1 violated".into());
    }
    if date_time_placed.date().weekday() != sales_day_name {
        return Err(format!(
            "SalesDayName {sales_day_name} inconsistent with timestamp weekday {}",
            date_time_placed.date().weekday()
        ));
    }
    Ok(TransactionRecord {
        location_number,
        sales_day_name,
        daily_minutes_open,
        date_time_placed,
        sales_as_minutes,
        quantity: quantity as u32,
    })
}

/// Parse a transaction CSV stream. A wrong or missing header is a hard
/// error; bad rows become structured rejections.
pub fn parse_transactions<R: Read>(source: R, opts: ParseOptions) -> Result<ParseOutcome> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let header = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header: {e}")))?
        .clone();
    let matches = header.len() == TRANSACTION_HEADER.len()
        && header.iter().zip(TRANSACTION_HEADER).all(|(got, want)| {
            if opts.case_insensitive_header {
                got.trim().eq_ignore_ascii_case(want)
            } else {
                got.trim() == want
            }
        });
    if !matches {
        return Err(Error::Data(format!(
            "header mismatch: expected {:?}, got {:?}",
            TRANSACTION_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut outcome = ParseOutcome::default();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        match row {
            Ok(fields) => match parse_row(&fields) {
                Ok(rec) => outcome.records.push(rec),
                Err(reason) => outcome.rejections.push(RowRejection { row: row_no, reason }),
            },
            Err(e) => outcome.rejections.push(RowRejection {
                row: row_no,
                reason: format!("unparseable row: {e}"),
            }),
        }
    }
    Ok(outcome)
}

/// Write records in the transaction CSV schema.
pub fn write_transactions<W: Write>(sink: W, records: &[TransactionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(TRANSACTION_HEADER)?;
    for r in records {
        w.write_record([
            r.location_number.to_string(),
            r.sales_day_name.to_string(),
            r.daily_minutes_open.to_string(),
            r.date_time_placed.format("%Y-%m-%d %H:%M:%S").to_string(),
            r.sales_as_minutes.to_string(),
            r.quantity.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Bin one location-day onto the fixed grid. `records` may be empty; all
/// non-empty records must share the key and opening minutes.
pub fn bin_day(
    key: LocationDay,
    minutes_open: u32,
    bin_width: u32,
    records: &[TransactionRecord],
) -> Result<BinnedSeries> {
    let grid = BinGrid::new(minutes_open, bin_width)?;
    let mut counts = vec![0u64; grid.n_bins()];
    for r in records {
        if r.location_number != key.location_number || r.date_time_placed.date() != key.calendar_day
        {
            return Err(Error::Data(format!(
                "bin_day called with mixed location-days: expected {:?}, got ({}, {})",
                key,
                r.location_number,
                r.date_time_placed.date()
            )));
        }
        if r.daily_minutes_open != minutes_open {
            return Err(Error::Data(format!(
                "inconsistent DailyMinutesOpen within {:?}: {} vs {}",
                key, r.daily_minutes_open, minutes_open
            )));
        }
        counts[grid.bin_of(r.sales_as_minutes)] += r.quantity as u64;
    }
    Ok(BinnedSeries {
        key,
        day_of_week: key.calendar_day.weekday(),
        partial_tail: grid.has_partial_tail(),
        grid,
        counts,
    })
}

/// Partition records by (location, calendar day) and bin each group.
/// The partition is exhaustive and disjoint, and independent of input order.
pub fn group_by_location_day(
    records: &[TransactionRecord],
    bin_width: u32,
) -> Result<BTreeMap<LocationDay, BinnedSeries>> {
    let mut groups: BTreeMap<LocationDay, Vec<&TransactionRecord>> = BTreeMap::new();
    for r in records {
        let key = LocationDay {
            location_number: r.location_number,
            calendar_day: r.date_time_placed.date(),
        };
        groups.entry(key).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (key, rows) in groups {
        let minutes_open = rows[0].daily_minutes_open;
        let owned: Vec<TransactionRecord> = rows.into_iter().cloned().collect();
        out.insert(key, bin_day(key, minutes_open, bin_width, &owned)?);
    }
    Ok(out)
}

const BINNED_HEADER: [&str; 7] = [
    "LocationNumber",
    "Day",
    "SalesDayName",
    "DailyMinutesOpen",
    "BinWidth",
    "BinIndex",
    "Count",
];

/// Write binned series, one row per bin (zeros included).
pub fn write_binned<W: Write>(
    sink: W,
    groups: &BTreeMap<LocationDay, BinnedSeries>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(BINNED_HEADER)?;
    for series in groups.values() {
        for (k, count) in series.counts.iter().enumerate() {
            w.write_record([
                series.key.location_number.to_string(),
                series.key.calendar_day.to_string(),
                series.day_of_week.to_string(),
                series.grid.minutes_open().to_string(),
                series.grid.bin_width().to_string(),
                k.to_string(),
                count.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read the binned CSV back into per-group series.
pub fn read_binned<R: Read>(source: R) -> Result<BTreeMap<LocationDay, BinnedSeries>> {
    let mut reader = csv::Reader::from_reader(source);
    let header = reader.headers()?.clone();
    if header.iter().ne(BINNED_HEADER) {
        return Err(Error::Data(format!(
            "binned header mismatch: got {:?}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out: BTreeMap<LocationDay, BinnedSeries> = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let bad = |what: &str| Error::Data(format!("binned row {}: {what}", i + 1));
        let location_number: u32 = row[0].parse().map_err(|_| bad("bad LocationNumber"))?;
        let calendar_day: NaiveDate = row[1].parse().map_err(|_| bad("bad Day"))?;
        let minutes_open: u32 = row[3].parse().map_err(|_| bad("bad DailyMinutesOpen"))?;
        let bin_width: u32 = row[4].parse().map_err(|_| bad("bad BinWidth"))?;
        let bin_index: usize = row[5].parse().map_err(|_| bad("bad BinIndex"))?;
        let count: u64 = row[6].parse().map_err(|_| bad("bad Count"))?;
        let key = LocationDay {
            location_number,
            calendar_day,
        };
        let entry = match out.entry(key) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(v) => {
                let grid = BinGrid::new(minutes_open, bin_width)?;
                v.insert(BinnedSeries {
                    key,
                    day_of_week: calendar_day.weekday(),
                    partial_tail: grid.has_partial_tail(),
                    counts: vec![0; grid.n_bins()],
                    grid,
                })
            }
        };
        if bin_index >= entry.counts.len() {
            return Err(bad("BinIndex out of range"));
        }
        entry.counts[bin_index] = count;
    }
    Ok(out)
}

/// Write the rejection sidecar log.
pub fn write_rejections<W: Write>(sink: W, rejections: &[RowRejection]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["Row", "Reason"])?;
    for r in rejections {
        w.write_record([r.row.to_string(), r.reason.clone()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(loc: u32, day: &str, minute: f64, qty: u32) -> TransactionRecord {
        let date: NaiveDate = day.parse().unwrap();
        TransactionRecord {
            location_number: loc,
            sales_day_name: date.weekday(),
            daily_minutes_open: 900,
            date_time_placed: date.and_hms_opt(6, 0, 0).unwrap()
                + chrono::TimeDelta::minutes(minute as i64),
            sales_as_minutes: minute,
            quantity: qty,
        }
    }

    const HEADER: &str = "LocationNumber,SalesDayName,DailyMinutesOpen,DateTimePlaced,SalesAsMinutes,Quantity\n";

    #[test]
    fn well_formed_rows_all_accepted() {
        let csv = format!(
            "{HEADER}\
             3,Monday,900,2024-01-01 10:35:00,275,2\n\
             3,Monday,900,2024-01-01 11:00:00,300,1\n\
             4,Tuesday,900,2024-01-02 06:00:00,0,5\n"
        );
        let out = parse_transactions(csv.as_bytes(), ParseOptions::default()).unwrap();
        assert_eq!(out.records.len(), 3);
        assert!(out.rejections.is_empty());
        assert_eq!(out.total_rows(), 3);
    }

    #[test]
    fn zero_quantity_rejected_with_reason() {
        let csv = format!("{HEADER}3,Monday,900,2024-01-01 10:35:00,275,0\n");
        let out = parse_transactions(csv.as_bytes(), ParseOptions::default()).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.rejections.len(), 1);
        assert_eq!(out.rejections[0].reason, "quantity >= 1 violated");
    }

    #[test]
    fn bad_timestamp_and_day_name_rejected_not_dropped() {
        let csv = format!(
            "{HEADER}\
             3,Monday,900,not-a-date,10,1\n\
             3,Funday,900,2024-01-01 10:00:00,240,1\n\
             3,Tuesday,900,2024-01-01 10:00:00,240,1\n"
        );
        let out = parse_transactions(csv.as_bytes(), ParseOptions::default()).unwrap();
        assert_eq!(out.records.len(), 0);
        assert_eq!(out.rejections.len(), 3);
        assert!(out.rejections[0].reason.contains("malformed timestamp"));
        assert!(out.rejections[1].reason.contains("unknown day name"));
        assert!(out.rejections[2].reason.contains("inconsistent"));
    }

    #[test]
    fn missing_column_is_hard_error() {
        let csv = "LocationNumber,SalesDayName,DailyMinutesOpen,DateTimePlaced,SalesAsMinutes\n";
        assert!(parse_transactions(csv.as_bytes(), ParseOptions::default()).is_err());
    }

    #[test]
    fn case_insensitive_header_behind_flag() {
        let csv = "locationnumber,salesdayname,dailyminutesopen,datetimeplaced,salesasminutes,quantity\n";
        assert!(parse_transactions(csv.as_bytes(), ParseOptions::default()).is_err());
        let opts = ParseOptions {
            case_insensitive_header: true,
        };
        assert!(parse_transactions(csv.as_bytes(), opts).is_ok());
    }

    fn key(loc: u32, day: &str) -> LocationDay {
        LocationDay {
            location_number: loc,
            calendar_day: day.parse().unwrap(),
        }
    }

    #[test]
    fn empty_day_preserves_zero_bins() {
        let s = bin_day(key(1, "2024-01-01"), 900, 15, &[]).unwrap();
        assert_eq!(s.counts.len(), 60);
        assert!(s.counts.iter().all(|&c| c == 0));
        assert!(!s.partial_tail);
    }

    #[test]
    fn boundary_event_lands_in_first_bin() {
        let s = bin_day(
            key(1, "2024-01-01"),
            900,
            15,
            &[rec(1, "2024-01-01", 14.9, 3)],
        )
        .unwrap();
        assert_eq!(s.counts[0], 3);
        assert!(s.counts[1..].iter().all(|&c| c == 0));
    }

    #[test]
    fn mixed_location_day_is_contract_violation() {
        let rows = vec![rec(1, "2024-01-01", 10.0, 1), rec(2, "2024-01-01", 10.0, 1)];
        assert!(bin_day(key(1, "2024-01-01"), 900, 15, &rows).is_err());
    }

    #[test]
    fn grouping_is_exhaustive_and_order_invariant() {
        let mut rows = Vec::new();
        for loc in [1u32, 2] {
            for day in ["2024-01-01", "2024-01-02", "2024-01-03"] {
                rows.push(rec(loc, day, 12.0, 2));
                rows.push(rec(loc, day, 400.0, 1));
            }
        }
        let grouped = group_by_location_day(&rows, 15).unwrap();
        assert_eq!(grouped.len(), 6);
        let total: u64 = grouped.values().map(|s| s.total_items()).sum();
        assert_eq!(total, rows.iter().map(|r| r.quantity as u64).sum::<u64>());

        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.swap(0, 5);
        assert_eq!(grouped, group_by_location_day(&shuffled, 15).unwrap());
    }

    #[test]
    fn binned_csv_round_trips() {
        let rows = vec![
            rec(1, "2024-01-01", 14.9, 3),
            rec(1, "2024-01-01", 899.0, 2),
            rec(7, "2024-01-03", 250.0, 1),
        ];
        let grouped = group_by_location_day(&rows, 15).unwrap();
        let mut buf = Vec::new();
        write_binned(&mut buf, &grouped).unwrap();
        let back = read_binned(buf.as_slice()).unwrap();
        assert_eq!(grouped, back);
    }

    #[test]
    fn partial_tail_conserves_quantity() {
        let mut r = rec(1, "2024-01-01", 902.0, 4);
        r.daily_minutes_open = 905;
        let s = bin_day(key(1, "2024-01-01"), 905, 15, &[r]).unwrap();
        assert!(s.partial_tail);
        assert_eq!(s.counts.len(), 61);
        assert_eq!(s.counts[60], 4);
        assert_eq!(s.total_items(), 4);
    }

    proptest! {
        /// Conservation: total binned count equals total accepted quantity,
        /// for arbitrary minute placements and quantities.
        #[test]
        fn conservation_exact(
            events in proptest::collection::vec((0.0f64..900.0, 1u32..20), 0..200)
        ) {
            let rows: Vec<TransactionRecord> = events
                .iter()
                .map(|&(m, q)| rec(1, "2024-01-01", m, q))
                .collect();
            let s = bin_day(key(1, "2024-01-01"), 900, 15, &rows).unwrap();
            let total: u64 = rows.iter().map(|r| r.quantity as u64).sum();
            prop_assert_eq!(s.total_items(), total);
        }
    }

    #[test]
    fn uniform_day_bins_pass_chi_square() {
        use crate::synthgen::{simulate_day, Curve};
        use rand::SeedableRng;
        let curve = Curve {
            c0: (240.0f64 / 900.0).ln(),
            c1: 0.0,
            c2: 0.0,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut agg = vec![0u64; 60];
        let reps = 1000;
        let mut grand = 0u64;
        for _ in 0..reps {
            let events = simulate_day(curve, 900, 0.0, 1.0, &mut rng);
            let rows: Vec<TransactionRecord> = events
                .iter()
                .map(|e| rec(1, "2024-01-01", e.minute as f64, e.quantity))
                .collect();
            let s = bin_day(key(1, "2024-01-01"), 900, 15, &rows).unwrap();
            let day_total: u64 = rows.iter().map(|r| r.quantity as u64).sum();
            assert_eq!(s.total_items(), day_total);
            grand += day_total;
            for (a, c) in agg.iter_mut().zip(&s.counts) {
                *a += c;
            }
        }
        // Chi-square against uniform expectation, df = 59, alpha = 0.01.
        let expect = grand as f64 / 60.0;
        let chi2: f64 = agg
            .iter()
            .map(|&o| (o as f64 - expect).powi(2) / expect)
            .sum();
        assert!(chi2 < 87.97, "chi-square {chi2} rejects uniformity");
    }
}
