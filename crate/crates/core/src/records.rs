//! Reading and writing CAM record files.
//!
//! JSONL: one object per line with `station_id`, `t_ms`, `lat_deg`, `lon_deg`,
//! `speed_mps`, `heading_deg` and optional `rsu_id`. CSV: the same columns
//! with a mandatory header row. Kinematic fields may be null/empty; such
//! records parse but are dropped later by de-duplication.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::cam::{CamRecord, RawCamRecord};

/// Fraction of unparseable lines a file may contain before it is rejected.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;
const MAX_REPORTED_OFFENDERS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    Jsonl,
    Csv,
}

impl FromStr for RecordFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown record format `{other}` (expected jsonl or csv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Offender {
    /// 1-based line number in the file.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {malformed} of {total} lines malformed; first offenders: {}", fmt_offenders(.offenders))]
    MalformedFile { path: PathBuf, malformed: usize, total: usize, offenders: Vec<Offender> },
}

fn fmt_offenders(o: &[Offender]) -> String {
    o.iter().map(|o| format!("line {} ({})", o.line, o.reason)).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Default)]
pub struct ParsedRecords {
    pub records: Vec<RawCamRecord>,
    pub total_lines: usize,
    pub rejected: usize,
    pub offenders: Vec<Offender>,
}

fn check_ranges(r: &RawCamRecord) -> Result<(), String> {
    if let Some(lat) = r.lat_deg {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(format!("latitude {lat} out of range"));
        }
    }
    if let Some(lon) = r.lon_deg {
        if !lon.is_finite() || !(-180.0..180.0).contains(&lon) {
            return Err(format!("longitude {lon} out of range"));
        }
    }
    if let Some(v) = r.speed_mps {
        if !v.is_finite() || v < 0.0 {
            return Err(format!("speed {v} out of range"));
        }
    }
    if let Some(h) = r.heading_deg {
        if !h.is_finite() || !(0.0..=360.0).contains(&h) {
            return Err(format!("heading {h} out of range"));
        }
    }
    Ok(())
}

/// Parses a record file. Lines that fail to parse or violate a field range
/// are counted; more than 1% of them makes the whole file an error.
pub fn parse_records(path: &Path, format: RecordFormat) -> Result<ParsedRecords, RecordError> {
    let io = |source| RecordError::Io { path: path.to_path_buf(), source };
    let file = File::open(path).map_err(io)?;
    let mut out = ParsedRecords::default();
    let reject = |out: &mut ParsedRecords, line: usize, reason: String| {
        out.rejected += 1;
        if out.offenders.len() < MAX_REPORTED_OFFENDERS {
            out.offenders.push(Offender { line, reason });
        }
    };
    match format {
        RecordFormat::Jsonl => {
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                out.total_lines += 1;
                match serde_json::from_str::<RawCamRecord>(&line)
                    .map_err(|e| e.to_string())
                    .and_then(|r| check_ranges(&r).map(|_| r))
                {
                    Ok(r) => out.records.push(r),
                    Err(reason) => reject(&mut out, i + 1, reason),
                }
            }
        }
        RecordFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
            let headers = rdr.headers().map_err(|e| io(csv_io(e)))?.clone();
            for (i, row) in rdr.records().enumerate() {
                out.total_lines += 1;
                // Header is line 1.
                let line = i + 2;
                let parsed = row
                    .map_err(|e| e.to_string())
                    .and_then(|row| row.deserialize::<RawCamRecord>(Some(&headers)).map_err(|e| e.to_string()))
                    .and_then(|r| check_ranges(&r).map(|_| r));
                match parsed {
                    Ok(r) => out.records.push(r),
                    Err(reason) => reject(&mut out, line, reason),
                }
            }
        }
    }
    if out.total_lines > 0
        && out.rejected as f64 > MAX_MALFORMED_FRACTION * out.total_lines as f64
    {
        return Err(RecordError::MalformedFile {
            path: path.to_path_buf(),
            malformed: out.rejected,
            total: out.total_lines,
            offenders: out.offenders,
        });
    }
    if out.rejected > 0 {
        log::warn!("{}: rejected {} of {} lines", path.display(), out.rejected, out.total_lines);
    }
    Ok(out)
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, e)
}

/// Writes complete records as JSONL.
pub fn write_jsonl(path: &Path, records: &[CamRecord]) -> Result<(), RecordError> {
    let io = |source| RecordError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        let raw = RawCamRecord::from(r.clone());
        serde_json::to_writer(&mut w, &raw).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}
