//! Cohort JSONL files: one search event per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use dsm_core::text::CohortRecord;

use crate::{Error, Result};

/// Share of malformed lines above which a file is rejected.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq)]
pub struct CohortFile {
    pub records: Vec<CohortRecord>,
    /// Lines skipped because they failed to parse or validate.
    pub malformed: usize,
    /// 1-based number of the first skipped line.
    pub first_malformed: Option<usize>,
}

fn parse_line(line: &str) -> Option<CohortRecord> {
    let record: CohortRecord = serde_json::from_str(line).ok()?;
    record.validate().ok()?;
    Some(record)
}

/// Parses JSONL text. Blank lines are ignored; CR before LF is stripped.
pub fn parse_cohorts(text: &str, origin: &str) -> Result<CohortFile> {
    let mut out = CohortFile { records: Vec::new(), malformed: 0, first_malformed: None };
    let mut lines = 0usize;
    for (i, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match parse_line(line) {
            Some(r) => out.records.push(r),
            None => {
                out.malformed += 1;
                out.first_malformed.get_or_insert(i + 1);
            }
        }
    }
    if out.malformed > 0 {
        let first = out.first_malformed.unwrap_or(0);
        if out.malformed as f64 > MAX_MALFORMED_FRACTION * lines as f64 {
            return Err(Error::Data(format!("{origin}: {} of {lines} lines malformed (first at line {first})", out.malformed)));
        }
        log::warn!("{origin}: skipped {} malformed lines (first at line {first})", out.malformed);
    }
    Ok(out)
}

pub fn read_cohorts(path: &Path) -> Result<CohortFile> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    parse_cohorts(&String::from_utf8_lossy(&bytes), &path.display().to_string())
}

pub fn write_cohorts(path: &Path, records: &[CohortRecord]) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

/// Reads every line of a text file, tolerating CRLF.
pub(crate) fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(Error::io(path))?;
    BufReader::new(file).lines().map(|l| l.map(|s| s.trim_end_matches('\r').to_string()).map_err(Error::io(path))).collect()
}
