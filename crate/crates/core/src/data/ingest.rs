//! CSV ingestion.
//!
//! Energy files: `timestamp,site_id,value`, one row per site-hour.
//! Weather files: `timestamp,location_id,<var_1>,...,<var_Dw>`.
//! A file may hold several sites; a site may not span several files.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, NaiveDateTime, Utc};
use indexmap::IndexMap;

use super::{Dataset, EnergySeries, Instant, WeatherSeries};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct IngestOptions {
    /// Expected weather variable names; taken from the first header if absent.
    pub variables: Option<Vec<String>>,
    /// Gaps of up to this many missing hours are filled linearly; longer gaps
    /// are errors. Zero rejects every gap.
    pub max_interpolated_gap: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RejectedRow {
    pub file: PathBuf,
    /// 1-based line number in the file, header included.
    pub line: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestReport {
    pub rejected: Vec<RejectedRow>,
    /// `(series id, missing hours)` filled by interpolation.
    pub interpolated: Vec<(String, usize)>,
}

/// Accepts RFC 3339 (`2012-01-01T01:00:00Z`) or naive `YYYY-MM-DD HH:MM[:SS]`
/// read as UTC.
pub fn parse_timestamp(s: &str) -> Result<Instant> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y%m%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc());
        }
    }
    Err(Error::Config(format!("unparseable timestamp `{s}`")))
}

/// Rows of one series as read from disk, before gap handling.
struct RawSeries {
    rows: Vec<(Instant, Vec<f64>)>,
    file: PathBuf,
}

fn read_file(
    path: &Path,
    expected_prefix: &[&str],
    variables: &mut Option<Vec<String>>,
    series: &mut IndexMap<String, RawSeries>,
    report: &mut IngestReport,
) -> Result<()> {
    let ingest_err = |reason: String| Error::Ingest { path: path.to_path_buf(), reason };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(ingest_err("file is empty".into()));
    }
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(&bytes[..]);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let prefix_ok =
        header.len() >= expected_prefix.len() && header.iter().zip(expected_prefix).all(|(h, e)| h.eq_ignore_ascii_case(e));
    if !prefix_ok {
        return Err(ingest_err(format!("header {header:?} does not start with {expected_prefix:?}")));
    }
    let value_cols: Vec<String> = header[expected_prefix.len()..].to_vec();
    if expected_prefix.len() == 3 {
        // energy schema is exactly three columns
        if !value_cols.is_empty() {
            return Err(ingest_err(format!("energy header has extra columns {value_cols:?}")));
        }
    } else {
        if value_cols.is_empty() {
            return Err(ingest_err("weather header declares no variables".into()));
        }
        match variables {
            Some(v) if *v != value_cols => {
                return Err(ingest_err(format!("weather variables {value_cols:?} differ from declared {v:?}")));
            }
            Some(_) => {}
            None => *variables = Some(value_cols.clone()),
        }
    }
    let width = header.len();
    let mut local: HashSet<String> = HashSet::new();
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let mut reject = |reason: String| report.rejected.push(RejectedRow { file: path.to_path_buf(), line, reason });
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                reject(e.to_string());
                continue;
            }
        };
        if record.len() != width {
            reject(format!("expected {width} fields, found {}", record.len()));
            continue;
        }
        let ts = match parse_timestamp(&record[0]) {
            Ok(t) => t,
            Err(e) => {
                reject(e.to_string());
                continue;
            }
        };
        let id = record[1].to_owned();
        let vals: std::result::Result<Vec<f64>, _> = record.iter().skip(2).map(str::parse::<f64>).collect();
        let vals = match vals {
            Ok(v) if v.iter().all(|x| x.is_finite()) => v,
            _ => {
                reject(format!("unparseable or non-finite value in {:?}", record.iter().skip(2).collect::<Vec<_>>()));
                continue;
            }
        };
        if !local.contains(&id) {
            if series.contains_key(&id) {
                return Err(Error::DuplicateId(id));
            }
            local.insert(id.clone());
            series.insert(id.clone(), RawSeries { rows: Vec::new(), file: path.to_path_buf() });
        }
        series.get_mut(&id).unwrap().rows.push((ts, vals));
        rows += 1;
    }
    if rows == 0 {
        return Err(ingest_err("no valid data rows".into()));
    }
    Ok(())
}

/// Sort, drop duplicate timestamps and fill or reject gaps.
fn regularize(id: &str, raw: RawSeries, max_gap: usize, report: &mut IngestReport) -> Result<(Vec<Instant>, Vec<Vec<f64>>)> {
    let RawSeries { mut rows, file } = raw;
    rows.sort_by_key(|r| r.0);
    let mut times: Vec<Instant> = Vec::with_capacity(rows.len());
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    let hour = Duration::hours(1);
    for (t, v) in rows {
        if let Some(&prev) = times.last() {
            if t == prev {
                report.rejected.push(RejectedRow {
                    file: file.clone(),
                    line: 0,
                    reason: format!("duplicate timestamp {t} for `{id}`"),
                });
                continue;
            }
            let delta = t - prev;
            if delta.num_seconds() % 3600 != 0 {
                return Err(Error::Misaligned(format!("`{id}`: step {prev} -> {t} is not a whole number of hours")));
            }
            let missing = (delta.num_hours() - 1) as usize;
            if missing > 0 {
                if missing > max_gap {
                    return Err(Error::Ingest {
                        path: file.clone(),
                        reason: format!("`{id}` has a gap of {missing} hour(s) after {prev}"),
                    });
                }
                let last = values.last().unwrap().clone();
                for k in 1..=missing {
                    let w = k as f64 / (missing + 1) as f64;
                    times.push(prev + hour * k as i32);
                    values.push(last.iter().zip(&v).map(|(a, b)| a + (b - a) * w).collect());
                }
                report.interpolated.push((id.to_owned(), missing));
            }
        }
        times.push(t);
        values.push(v);
    }
    Ok((times, values))
}

/// Read every file and assemble an aligned [`Dataset`]. Nothing is returned
/// unless all files parse and share one hourly timeline.
pub fn ingest(energy_files: &[PathBuf], weather_files: &[PathBuf], options: &IngestOptions) -> Result<(Dataset, IngestReport)> {
    if energy_files.is_empty() || weather_files.is_empty() {
        return Err(Error::Empty("need at least one energy file and one weather file".into()));
    }
    let mut report = IngestReport::default();
    let mut energy_raw = IndexMap::new();
    let mut none = None;
    for f in energy_files {
        read_file(f, &["timestamp", "site_id", "value"], &mut none, &mut energy_raw, &mut report)?;
    }
    let mut variables = options.variables.clone();
    let mut weather_raw = IndexMap::new();
    for f in weather_files {
        read_file(f, &["timestamp", "location_id"], &mut variables, &mut weather_raw, &mut report)?;
    }
    let variables = variables.unwrap_or_default();

    let mut energy = Vec::new();
    for (id, raw) in energy_raw {
        let (timestamps, rows) = regularize(&id, raw, options.max_interpolated_gap, &mut report)?;
        energy.push(EnergySeries { site_id: id, timestamps, values: rows.into_iter().map(|r| r[0]).collect() });
    }
    let mut weather = Vec::new();
    for (id, raw) in weather_raw {
        let (timestamps, rows) = regularize(&id, raw, options.max_interpolated_gap, &mut report)?;
        let n = rows.len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        weather.push(WeatherSeries { location_id: id, timestamps, variables: Tensor::new([n, variables.len()], data)? });
    }
    let dataset = Dataset::new(energy, weather, variables)?;
    Ok((dataset, report))
}
