//! Daily snapshot ingestion and the per-area reporting triangle.
//!
//! A snapshot dated `R` carries cumulative counts for test dates strictly
//! before `R`. The triangle stores, for each test date `t`, the reports at
//! lags `j = R - t` over the span of snapshot dates seen. Snapshot days that
//! are absent (or that omit a test date) carry the previous value forward with
//! a missing flag; those entries are never used for rate estimation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{Read, Write};

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SNAPSHOT_HEADER: [&str; 4] = ["area_id", "test_date", "report_date", "count"];
pub const TRIANGLE_HEADER: [&str; 6] = [
    "area_id",
    "test_date",
    "lag",
    "count",
    "converged",
    "over_report_flag",
];

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|e| Error::InvalidInput(format!("bad date {s:?}: {e}")))
}

pub fn days_between(from: NaiveDate, to: NaiveDate) -> i64 {
    (to - from).num_days()
}

pub fn add_days(date: NaiveDate, n: i64) -> NaiveDate {
    if n >= 0 {
        date + Days::new(n as u64)
    } else {
        date - Days::new(n.unsigned_abs())
    }
}

/// One `(area, test_date, report_date, count)` row of a snapshot file.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub area_id: String,
    pub test_date: NaiveDate,
    pub report_date: NaiveDate,
    pub count: u64,
}

/// All cumulative counts published on one report date.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportSnapshot {
    pub report_date: NaiveDate,
    pub entries: BTreeMap<(String, NaiveDate), u64>,
}

impl ReportSnapshot {
    pub fn new(report_date: NaiveDate) -> Self {
        Self {
            report_date,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, area: &str, test_date: NaiveDate, count: u64) -> Result<()> {
        if test_date >= self.report_date {
            return Err(Error::TestDateNotBeforeReport {
                test_date,
                report_date: self.report_date,
            });
        }
        if self
            .entries
            .insert((area.to_string(), test_date), count)
            .is_some()
        {
            return Err(Error::InvalidInput(format!(
                "duplicate entry for {area} test date {test_date} in snapshot {}",
                self.report_date
            )));
        }
        Ok(())
    }

    pub fn areas(&self) -> BTreeSet<&str> {
        self.entries.keys().map(|(a, _)| a.as_str()).collect()
    }
}

/// Result of parsing a snapshot CSV: good records plus malformed lines.
#[derive(Debug, Clone, Default)]
pub struct SnapshotParse {
    pub records: Vec<SnapshotRecord>,
    pub malformed: Vec<(u64, String)>,
    pub rows: usize,
}

impl SnapshotParse {
    pub fn malformed_fraction(&self) -> f64 {
        if self.rows == 0 {
            0.0
        } else {
            self.malformed.len() as f64 / self.rows as f64
        }
    }
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let found: Vec<&str> = found.iter().map(str::trim).collect();
    if found != expected {
        return Err(Error::InvalidInput(format!(
            "expected header {:?}, found {:?}",
            expected.join(","),
            found.join(",")
        )));
    }
    Ok(())
}

/// Parses `area_id,test_date,report_date,count`. Rows that fail to parse are
/// collected with their line numbers instead of aborting.
pub fn parse_snapshot_csv<R: Read>(reader: R) -> Result<SnapshotParse> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    check_header(rdr.headers()?, &SNAPSHOT_HEADER)?;
    let mut out = SnapshotParse::default();
    for rec in rdr.records() {
        out.rows += 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                out.malformed.push((line, e.to_string()));
                continue;
            }
        };
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        match parse_snapshot_row(&rec) {
            Ok(r) => out.records.push(r),
            Err(msg) => out.malformed.push((line, msg)),
        }
    }
    Ok(out)
}

fn parse_snapshot_row(rec: &csv::StringRecord) -> std::result::Result<SnapshotRecord, String> {
    if rec.len() != 4 {
        return Err(format!("expected 4 fields, found {}", rec.len()));
    }
    let area_id = rec[0].trim().to_string();
    if area_id.is_empty() {
        return Err("empty area_id".into());
    }
    let test_date = parse_date(&rec[1]).map_err(|e| e.to_string())?;
    let report_date = parse_date(&rec[2]).map_err(|e| e.to_string())?;
    let count: u64 = rec[3]
        .trim()
        .parse()
        .map_err(|_| format!("count {:?} is not a non-negative integer", &rec[3]))?;
    if test_date >= report_date {
        return Err(format!(
            "test date {test_date} is not before report date {report_date}"
        ));
    }
    Ok(SnapshotRecord {
        area_id,
        test_date,
        report_date,
        count,
    })
}

/// Groups records into snapshots ordered by report date.
pub fn group_snapshots(records: &[SnapshotRecord]) -> Result<Vec<ReportSnapshot>> {
    let mut by_date: BTreeMap<NaiveDate, ReportSnapshot> = BTreeMap::new();
    for r in records {
        by_date
            .entry(r.report_date)
            .or_insert_with(|| ReportSnapshot::new(r.report_date))
            .insert(&r.area_id, r.test_date, r.count)?;
    }
    Ok(by_date.into_values().collect())
}

pub fn snapshot_records(snapshots: &[ReportSnapshot]) -> Vec<SnapshotRecord> {
    snapshots
        .iter()
        .flat_map(|s| {
            s.entries.iter().map(move |((area, test_date), count)| SnapshotRecord {
                area_id: area.clone(),
                test_date: *test_date,
                report_date: s.report_date,
                count: *count,
            })
        })
        .collect()
}

pub fn write_snapshots_csv<W: Write>(snapshots: &[ReportSnapshot], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(SNAPSHOT_HEADER)?;
    for r in snapshot_records(snapshots) {
        wtr.write_record([
            r.area_id.as_str(),
            &r.test_date.to_string(),
            &r.report_date.to_string(),
            &r.count.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// One cumulative report for a test date at a given lag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagReport {
    pub count: u64,
    /// Carried forward from the previous lag; no snapshot value existed.
    pub missing: bool,
    /// Lower than an earlier report for the same test date (a correction).
    pub over_report: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriangleRow {
    pub test_date: NaiveDate,
    /// Lag of `reports[0]`.
    pub first_lag: u32,
    pub reports: Vec<LagReport>,
    pub converged: bool,
    pub final_count: Option<u64>,
}

impl TriangleRow {
    fn empty(test_date: NaiveDate) -> Self {
        Self {
            test_date,
            first_lag: 1,
            reports: Vec::new(),
            converged: false,
            final_count: None,
        }
    }

    pub fn report(&self, lag: u32) -> Option<&LagReport> {
        if lag < self.first_lag {
            return None;
        }
        self.reports.get((lag - self.first_lag) as usize)
    }

    pub fn max_lag(&self) -> Option<u32> {
        if self.reports.is_empty() {
            None
        } else {
            Some(self.first_lag + self.reports.len() as u32 - 1)
        }
    }

    /// Non-missing reports as `(lag, count)`.
    pub fn observed(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.reports
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.missing)
            .map(move |(k, r)| (self.first_lag + k as u32, r.count))
    }

    /// The most recent non-missing report, which is all the emission model uses.
    pub fn latest_observed(&self) -> Option<(u32, u64)> {
        self.observed().last()
    }

    pub fn has_over_report(&self) -> bool {
        self.reports.iter().any(|r| r.over_report)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportTriangle {
    pub area_id: String,
    /// Contiguous daily rows.
    pub rows: Vec<TriangleRow>,
}

impl ReportTriangle {
    pub fn start_date(&self) -> Option<NaiveDate> {
        self.rows.first().map(|r| r.test_date)
    }

    pub fn end_date(&self) -> Option<NaiveDate> {
        self.rows.last().map(|r| r.test_date)
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.rows.iter().map(|r| r.test_date).collect()
    }

    pub fn row(&self, date: NaiveDate) -> Option<&TriangleRow> {
        let start = self.start_date()?;
        let idx = days_between(start, date);
        if idx < 0 {
            return None;
        }
        self.rows.get(idx as usize)
    }

    /// Latest report date represented in the triangle.
    pub fn last_report_date(&self) -> Option<NaiveDate> {
        self.rows
            .iter()
            .filter_map(|r| r.max_lag().map(|l| add_days(r.test_date, l as i64)))
            .max()
    }

    /// The triangle as it would have looked using only snapshots dated on or
    /// before `report_date`. Convergence flags are cleared.
    pub fn as_of(&self, report_date: NaiveDate) -> ReportTriangle {
        let rows = self
            .rows
            .iter()
            .filter(|r| r.test_date < report_date)
            .map(|r| {
                let max_lag = days_between(r.test_date, report_date) as u32;
                let keep = if max_lag < r.first_lag {
                    0
                } else {
                    ((max_lag - r.first_lag + 1) as usize).min(r.reports.len())
                };
                let mut reports = r.reports[..keep].to_vec();
                while reports.last().is_some_and(|l| l.missing) {
                    reports.pop();
                }
                TriangleRow {
                    test_date: r.test_date,
                    first_lag: r.first_lag,
                    reports,
                    converged: false,
                    final_count: None,
                }
            })
            .collect();
        ReportTriangle {
            area_id: self.area_id.clone(),
            rows,
        }
    }

    /// Every non-missing report as a snapshot record.
    pub fn to_records(&self) -> Vec<SnapshotRecord> {
        let mut out = Vec::new();
        for row in &self.rows {
            for (lag, count) in row.observed() {
                out.push(SnapshotRecord {
                    area_id: self.area_id.clone(),
                    test_date: row.test_date,
                    report_date: add_days(row.test_date, lag as i64),
                    count,
                });
            }
        }
        out.sort();
        out
    }

    pub fn over_report_dates(&self) -> Vec<NaiveDate> {
        self.rows
            .iter()
            .filter(|r| r.has_over_report())
            .map(|r| r.test_date)
            .collect()
    }
}

/// Builds one area's triangle from snapshots sorted by report date.
pub fn build_triangle(snapshots: &[ReportSnapshot], area: &str) -> Result<ReportTriangle> {
    for w in snapshots.windows(2) {
        if w[0].report_date == w[1].report_date {
            return Err(Error::DuplicateReportDate(w[1].report_date));
        }
        if w[0].report_date > w[1].report_date {
            return Err(Error::InvalidInput(format!(
                "snapshots not sorted: {} after {}",
                w[1].report_date, w[0].report_date
            )));
        }
    }
    let (first_report, last_report) = match (snapshots.first(), snapshots.last()) {
        (Some(f), Some(l)) => (f.report_date, l.report_date),
        _ => return Err(Error::InvalidInput("no snapshots".into())),
    };

    let mut values: BTreeMap<NaiveDate, BTreeMap<NaiveDate, u64>> = BTreeMap::new();
    for s in snapshots {
        for ((a, test_date), count) in &s.entries {
            if a == area {
                values
                    .entry(*test_date)
                    .or_default()
                    .insert(s.report_date, *count);
            }
        }
    }
    let (first_test, last_test) = match (values.keys().next(), values.keys().next_back()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => {
            return Err(Error::InvalidInput(format!(
                "area {area} does not appear in any snapshot"
            )))
        }
    };

    let n_days = days_between(first_test, last_test) as usize + 1;
    let mut rows = Vec::with_capacity(n_days);
    for k in 0..n_days {
        let test_date = add_days(first_test, k as i64);
        let mut row = TriangleRow::empty(test_date);
        let Some(by_report) = values.get(&test_date) else {
            rows.push(row);
            continue;
        };
        let window_start = first_report.max(add_days(test_date, 1));
        row.first_lag = days_between(test_date, window_start) as u32;
        let last_lag = days_between(test_date, last_report) as u32;
        let mut prev: Option<u64> = None;
        let mut running_max = 0u64;
        for lag in row.first_lag..=last_lag {
            let report_date = add_days(test_date, lag as i64);
            match by_report.get(&report_date) {
                Some(&count) => {
                    let over_report = prev.is_some() && count < running_max;
                    running_max = running_max.max(count);
                    prev = Some(count);
                    row.reports.push(LagReport {
                        count,
                        missing: false,
                        over_report,
                    });
                }
                None => row.reports.push(LagReport {
                    count: prev.unwrap_or(0),
                    missing: true,
                    over_report: false,
                }),
            }
        }
        while row.reports.last().is_some_and(|r| r.missing) {
            row.reports.pop();
        }
        if row.has_over_report() {
            log::warn!("{area}: decreasing cumulative count for test date {test_date}");
        }
        rows.push(row);
    }
    Ok(ReportTriangle {
        area_id: area.to_string(),
        rows,
    })
}

/// Builds triangles for every area present in the snapshots.
pub fn build_triangles(snapshots: &[ReportSnapshot]) -> Result<Vec<ReportTriangle>> {
    let areas: BTreeSet<String> = snapshots
        .iter()
        .flat_map(|s| s.areas().into_iter().map(str::to_string))
        .collect();
    areas.iter().map(|a| build_triangle(snapshots, a)).collect()
}

/// When a test date's cumulative count is treated as final.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRule {
    /// Any observed report at this lag or later is final.
    pub min_lag: u32,
    /// Number of consecutive, equal, observed reports that also count as final...
    pub stable_reports: usize,
    /// ...provided each of them is at least this lag.
    pub stable_min_lag: u32,
}

impl Default for ConvergenceRule {
    fn default() -> Self {
        Self {
            min_lag: 7,
            stable_reports: 3,
            stable_min_lag: 4,
        }
    }
}

impl ConvergenceRule {
    pub fn is_converged(&self, row: &TriangleRow) -> bool {
        let observed: Vec<(u32, u64)> = row.observed().collect();
        let Some(&(last_lag, last_count)) = observed.last() else {
            return false;
        };
        if last_lag >= self.min_lag {
            return true;
        }
        let k = self.stable_reports;
        if k == 0 || observed.len() < k {
            return false;
        }
        let tail = &observed[observed.len() - k..];
        tail.iter().all(|(l, c)| *c == last_count && *l >= self.stable_min_lag)
            && tail.windows(2).all(|w| w[1].0 == w[0].0 + 1)
    }
}

pub fn mark_convergence(mut triangle: ReportTriangle, rule: &ConvergenceRule) -> ReportTriangle {
    for row in &mut triangle.rows {
        row.converged = rule.is_converged(row);
        row.final_count = if row.converged {
            row.latest_observed().map(|(_, c)| c)
        } else {
            None
        };
    }
    triangle
}

/// `y_t^(j) / x_t` for a converged test date.
pub fn reporting_rate(triangle: &ReportTriangle, date: NaiveDate, lag: u32) -> Result<f64> {
    let row = triangle
        .row(date)
        .ok_or_else(|| Error::InvalidInput(format!("{date} is outside the triangle")))?;
    if !row.converged {
        return Err(Error::Unconverged(date));
    }
    let x = row.final_count.ok_or(Error::Unconverged(date))?;
    if x == 0 {
        return Err(Error::UndefinedRate(date));
    }
    let report = row
        .report(lag)
        .filter(|r| !r.missing)
        .ok_or(Error::MissingReport { date, lag })?;
    let rate = report.count as f64 / x as f64;
    Ok(if row.has_over_report() { rate.min(1.0) } else { rate })
}

pub fn write_triangle_csv<W: Write>(triangles: &[ReportTriangle], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(TRIANGLE_HEADER)?;
    for tri in triangles {
        for row in &tri.rows {
            for (k, r) in row.reports.iter().enumerate() {
                if r.missing {
                    continue;
                }
                let lag = row.first_lag + k as u32;
                wtr.write_record([
                    tri.area_id.as_str(),
                    &row.test_date.to_string(),
                    &lag.to_string(),
                    &r.count.to_string(),
                    if row.converged { "true" } else { "false" },
                    if r.over_report { "true" } else { "false" },
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(format!("expected a boolean, found {other:?}")),
    }
}

/// Reads triangles written by [`write_triangle_csv`]. Gaps between observed
/// lags are filled by carrying the previous value forward as missing.
pub fn read_triangle_csv<R: Read>(reader: R, source: &str) -> Result<Vec<ReportTriangle>> {
    type RowData = (bool, BTreeMap<u32, (u64, bool)>);
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(rdr.headers()?, &TRIANGLE_HEADER)?;
    let mut areas: BTreeMap<String, BTreeMap<NaiveDate, RowData>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| Error::Parse {
            path: source.to_string(),
            line,
            message,
        };
        if rec.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", rec.len())));
        }
        let test_date = parse_date(&rec[1]).map_err(|e| bad(e.to_string()))?;
        let lag: u32 = rec[2].trim().parse().map_err(|_| bad("bad lag".into()))?;
        let count: u64 = rec[3].trim().parse().map_err(|_| bad("bad count".into()))?;
        let converged = parse_bool(&rec[4]).map_err(bad)?;
        let over = parse_bool(&rec[5]).map_err(bad)?;
        if lag == 0 {
            return Err(bad("lag must be at least 1".into()));
        }
        let entry = areas
            .entry(rec[0].trim().to_string())
            .or_default()
            .entry(test_date)
            .or_insert((converged, BTreeMap::new()));
        entry.0 |= converged;
        entry.1.insert(lag, (count, over));
    }

    let mut out = Vec::new();
    for (area_id, by_date) in areas {
        let first = *by_date.keys().next().expect("non-empty");
        let last = *by_date.keys().next_back().expect("non-empty");
        let n = days_between(first, last) as usize + 1;
        let mut rows = Vec::with_capacity(n);
        for k in 0..n {
            let test_date = add_days(first, k as i64);
            let mut row = TriangleRow::empty(test_date);
            if let Some((converged, lags)) = by_date.get(&test_date) {
                let first_lag = *lags.keys().next().expect("non-empty");
                let last_lag = *lags.keys().next_back().expect("non-empty");
                row.first_lag = first_lag;
                let mut prev = 0;
                for lag in first_lag..=last_lag {
                    match lags.get(&lag) {
                        Some(&(count, over_report)) => {
                            prev = count;
                            row.reports.push(LagReport {
                                count,
                                missing: false,
                                over_report,
                            });
                        }
                        None => row.reports.push(LagReport {
                            count: prev,
                            missing: true,
                            over_report: false,
                        }),
                    }
                }
                row.converged = *converged;
                row.final_count = if *converged { row.latest_observed().map(|(_, c)| c) } else { None };
            }
            rows.push(row);
        }
        out.push(ReportTriangle { area_id, rows });
    }
    Ok(out)
}

/// Undirected area adjacency without self-loops.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjacencyGraph {
    adjacency: BTreeMap<String, BTreeSet<String>>,
}

impl AdjacencyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_edges<'a, I>(edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut g = Self::new();
        for (a, b) in edges {
            g.add_edge(a, b)?;
        }
        Ok(g)
    }

    pub fn add_node(&mut self, a: &str) {
        self.adjacency.entry(a.to_string()).or_default();
    }

    pub fn add_edge(&mut self, a: &str, b: &str) -> Result<()> {
        if a == b {
            return Err(Error::InvalidInput(format!("self-loop on {a}")));
        }
        self.adjacency.entry(a.to_string()).or_default().insert(b.to_string());
        self.adjacency.entry(b.to_string()).or_default().insert(a.to_string());
        Ok(())
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.adjacency.keys().map(String::as_str)
    }

    pub fn neighbours(&self, a: &str) -> impl Iterator<Item = &str> {
        self.adjacency
            .get(a)
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }

    /// Areas within `n` hops of `area`, excluding `area` itself.
    pub fn n_hop(&self, area: &str, n: usize) -> BTreeSet<String> {
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut queue = VecDeque::from([(area.to_string(), 0usize)]);
        seen.insert(area.to_string());
        while let Some((node, depth)) = queue.pop_front() {
            if depth == n {
                continue;
            }
            for nb in self.neighbours(&node) {
                if seen.insert(nb.to_string()) {
                    queue.push_back((nb.to_string(), depth + 1));
                }
            }
        }
        seen.remove(area);
        seen
    }

    /// Reads `area_a,area_b` edge rows.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        check_header(rdr.headers()?, &["area_a", "area_b"])?;
        let mut g = Self::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(Error::InvalidInput("edge rows need two fields".into()));
            }
            g.add_edge(rec[0].trim(), rec[1].trim())?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        parse_date(s).unwrap()
    }

    fn snap(report: &str, rows: &[(&str, u64)]) -> ReportSnapshot {
        let mut s = ReportSnapshot::new(d(report));
        for (t, c) in rows {
            s.insert("leeds", d(t), *c).unwrap();
        }
        s
    }

    #[test]
    fn consecutive_snapshots_agree_before_updates() {
        let s13 = snap(
            "2020-12-13",
            &[("2020-12-08", 100), ("2020-12-09", 90), ("2020-12-10", 70), ("2020-12-11", 40), ("2020-12-12", 10)],
        );
        let s14 = snap(
            "2020-12-14",
            &[
                ("2020-12-08", 100),
                ("2020-12-09", 90),
                ("2020-12-10", 80),
                ("2020-12-11", 60),
                ("2020-12-12", 30),
                ("2020-12-13", 12),
            ],
        );
        let tri = build_triangle(&[s13, s14], "leeds").unwrap();
        for date in ["2020-12-08", "2020-12-09"] {
            let row = tri.row(d(date)).unwrap();
            let counts: Vec<u64> = row.observed().map(|(_, c)| c).collect();
            assert_eq!(counts.len(), 2);
            assert_eq!(counts[0], counts[1]);
        }
        let row = tri.row(d("2020-12-10")).unwrap();
        assert_eq!(row.report(3).unwrap().count, 70);
        assert_eq!(row.report(4).unwrap().count, 80);
        let last = tri.row(d("2020-12-13")).unwrap();
        assert_eq!(last.first_lag, 1);
        assert_eq!(last.reports.len(), 1);
    }

    #[test]
    fn single_snapshot_has_one_report_per_row() {
        let s = snap("2020-12-14", &[("2020-12-10", 5), ("2020-12-12", 3), ("2020-12-13", 1)]);
        let tri = build_triangle(&[s], "leeds").unwrap();
        assert_eq!(tri.rows.len(), 4);
        for row in &tri.rows {
            match row.test_date.to_string().as_str() {
                "2020-12-11" => assert!(row.reports.is_empty()),
                _ => {
                    assert_eq!(row.reports.len(), 1);
                    assert_eq!(row.first_lag as i64, days_between(row.test_date, d("2020-12-14")));
                }
            }
        }
    }

    #[test]
    fn duplicate_report_date_is_rejected() {
        let a = snap("2020-12-14", &[("2020-12-10", 5)]);
        let b = snap("2020-12-14", &[("2020-12-10", 6)]);
        assert!(matches!(
            build_triangle(&[a, b], "leeds"),
            Err(Error::DuplicateReportDate(_))
        ));
    }

    #[test]
    fn decreasing_count_sets_over_report_flag() {
        let a = snap("2020-12-11", &[("2020-12-10", 9)]);
        let b = snap("2020-12-12", &[("2020-12-10", 12)]);
        let c = snap("2020-12-13", &[("2020-12-10", 11)]);
        let tri = build_triangle(&[a, b, c], "leeds").unwrap();
        let row = &tri.rows[0];
        assert_eq!(row.reports.len(), 3);
        assert!(!row.reports[1].over_report);
        assert!(row.reports[2].over_report);
        assert_eq!(tri.over_report_dates(), vec![d("2020-12-10")]);
    }

    #[test]
    fn missing_snapshot_day_carries_forward() {
        let a = snap("2020-12-11", &[("2020-12-10", 4)]);
        let c = snap("2020-12-13", &[("2020-12-10", 8)]);
        let tri = build_triangle(&[a, c], "leeds").unwrap();
        let row = &tri.rows[0];
        assert_eq!(row.reports[1], LagReport { count: 4, missing: true, over_report: false });
        assert_eq!(row.latest_observed(), Some((3, 8)));
        // Rate estimation skips the gap.
        let tri = mark_convergence(tri, &ConvergenceRule { min_lag: 3, ..Default::default() });
        assert!(matches!(
            reporting_rate(&tri, d("2020-12-10"), 2),
            Err(Error::MissingReport { .. })
        ));
        assert_eq!(reporting_rate(&tri, d("2020-12-10"), 1).unwrap(), 0.5);
    }

    fn row_with(counts: &[u64]) -> TriangleRow {
        TriangleRow {
            test_date: d("2020-11-01"),
            first_lag: 1,
            reports: counts
                .iter()
                .map(|&count| LagReport { count, missing: false, over_report: false })
                .collect(),
            converged: false,
            final_count: None,
        }
    }

    #[test]
    fn convergence_rule() {
        let rule = ConvergenceRule::default();
        assert!(rule.is_converged(&row_with(&[10, 14, 15, 15, 15, 15, 15])));
        assert!(!rule.is_converged(&row_with(&[10, 14])));
        // Stable at lags 4..6 converges before lag 7.
        assert!(rule.is_converged(&row_with(&[1, 2, 3, 5, 5, 5])));
        // Stable but too early.
        assert!(!rule.is_converged(&row_with(&[5, 5, 5])));
        let tri = ReportTriangle {
            area_id: "a".into(),
            rows: vec![row_with(&[10, 14, 15, 15, 15, 15, 15])],
        };
        let tri = mark_convergence(tri, &rule);
        assert_eq!(tri.rows[0].final_count, Some(15));
    }

    #[test]
    fn reporting_rate_cases() {
        let mut r = row_with(&[50, 80, 100, 100, 100, 100, 100]);
        r.converged = true;
        r.final_count = Some(100);
        let mut zero = row_with(&[0, 0, 0, 0, 0, 0, 0]);
        zero.test_date = d("2020-11-02");
        zero.converged = true;
        zero.final_count = Some(0);
        let mut open = row_with(&[3]);
        open.test_date = d("2020-11-03");
        let tri = ReportTriangle { area_id: "a".into(), rows: vec![r, zero, open] };
        assert_eq!(reporting_rate(&tri, d("2020-11-01"), 1).unwrap(), 0.5);
        assert_eq!(reporting_rate(&tri, d("2020-11-01"), 7).unwrap(), 1.0);
        assert!(matches!(reporting_rate(&tri, d("2020-11-02"), 1), Err(Error::UndefinedRate(_))));
        assert!(matches!(reporting_rate(&tri, d("2020-11-03"), 1), Err(Error::Unconverged(_))));
    }

    #[test]
    fn over_reported_rates_are_clamped() {
        let mut r = row_with(&[12, 15, 14, 14, 14, 14, 14]);
        r.reports[2].over_report = true;
        r.converged = true;
        r.final_count = Some(14);
        let tri = ReportTriangle { area_id: "a".into(), rows: vec![r] };
        assert_eq!(reporting_rate(&tri, d("2020-11-01"), 2).unwrap(), 1.0);
    }

    #[test]
    fn parse_reports_malformed_lines() {
        let csv = "area_id,test_date,report_date,count\n\
                   a,2020-11-01,2020-11-02,5\n\
                   a,2020-11-01,2020-11-0x,5\n\
                   a,2020-11-02,2020-11-02,5\n\
                   a,2020-11-01,2020-11-03,-1\n";
        let parsed = parse_snapshot_csv(csv.as_bytes()).unwrap();
        assert_eq!(parsed.records.len(), 1);
        let lines: Vec<u64> = parsed.malformed.iter().map(|(l, _)| *l).collect();
        assert_eq!(lines, vec![3, 4, 5]);
        assert!(parse_snapshot_csv("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn triangle_csv_round_trip() {
        let a = snap("2020-12-11", &[("2020-12-09", 3), ("2020-12-10", 4)]);
        let b = snap("2020-12-13", &[("2020-12-09", 6), ("2020-12-10", 8), ("2020-12-12", 1)]);
        let tri = mark_convergence(build_triangle(&[a, b], "leeds").unwrap(), &ConvergenceRule::default());
        let mut buf = Vec::new();
        write_triangle_csv(std::slice::from_ref(&tri), &mut buf).unwrap();
        let back = read_triangle_csv(buf.as_slice(), "mem").unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].to_records(), tri.to_records());
        let mut buf2 = Vec::new();
        write_triangle_csv(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn as_of_truncates_reports() {
        let a = snap("2020-12-11", &[("2020-12-09", 3), ("2020-12-10", 4)]);
        let b = snap("2020-12-12", &[("2020-12-09", 6), ("2020-12-10", 8), ("2020-12-11", 2)]);
        let tri = build_triangle(&[a.clone(), b], "leeds").unwrap();
        let old = tri.as_of(d("2020-12-11"));
        assert_eq!(old.to_records(), build_triangle(&[a], "leeds").unwrap().to_records());
        assert_eq!(old.last_report_date(), Some(d("2020-12-11")));
    }

    #[test]
    fn n_hop_neighbourhoods() {
        let g = AdjacencyGraph::from_edges([("a", "b"), ("b", "c"), ("c", "d")]).unwrap();
        let one: Vec<_> = g.n_hop("a", 1).into_iter().collect();
        assert_eq!(one, vec!["b"]);
        let two: Vec<_> = g.n_hop("a", 2).into_iter().collect();
        assert_eq!(two, vec!["b", "c"]);
        assert!(g.n_hop("b", 0).is_empty());
        assert!(g.n_hop("zzz", 3).is_empty());
        assert!(AdjacencyGraph::from_edges([("a", "a")]).is_err());
        let csv = "area_a,area_b\nx,y\n";
        let g = AdjacencyGraph::read_csv(csv.as_bytes()).unwrap();
        assert_eq!(g.neighbours("y").collect::<Vec<_>>(), vec!["x"]);
    }
}
