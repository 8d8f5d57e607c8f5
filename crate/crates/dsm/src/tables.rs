//! Tab-separated side files: ground truth, ad catalog and query frequencies.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use dsm_core::synth::{CatalogAd, GroundTruthRow};
use dsm_core::text::{normalize_text, CohortRecord};

use crate::cohorts::read_lines;
use crate::{Error, Result};

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::io(path))
}

fn fields<'a>(line: &'a str, n: usize, path: &Path, i: usize) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != n {
        return Err(Error::Data(format!("{}:{}: expected {n} tab-separated fields, found {}", path.display(), i + 1, f.len())));
    }
    Ok(f)
}

fn data_lines(path: &Path) -> Result<impl Iterator<Item = (usize, String)>> {
    Ok(read_lines(path)?.into_iter().enumerate().filter(|(_, l)| !l.is_empty()))
}

fn num<T: std::str::FromStr>(s: &str, path: &Path, i: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
}

/// `query<TAB>ad_id<TAB>relevance_real<TAB>grade`, no header.
pub fn write_ground_truth(path: &Path, rows: &[GroundTruthRow]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        writeln!(out, "{}\t{}\t{:?}\t{}", r.query, r.ad_id, r.relevance, r.grade).expect("string write");
    }
    write_text(path, &out)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthRow>> {
    let mut rows = Vec::new();
    for (i, line) in data_lines(path)? {
        let f = fields(&line, 4, path, i)?;
        let grade: u8 = num(f[3], path, i)?;
        if grade > 5 {
            return Err(Error::Data(format!("{}:{}: grade {grade} outside 0..=5", path.display(), i + 1)));
        }
        rows.push(GroundTruthRow { query: f[0].into(), ad_id: f[1].into(), relevance: num(f[2], path, i)?, grade });
    }
    Ok(rows)
}

/// `ad_id<TAB>title<TAB>description<TAB>display_url`, no header.
pub fn write_ads(path: &Path, ads: &[CatalogAd]) -> Result<()> {
    let mut out = String::new();
    for a in ads {
        writeln!(out, "{}\t{}\t{}\t{}", a.ad_id, a.title, a.description, a.display_url).expect("string write");
    }
    write_text(path, &out)
}

pub fn read_ads(path: &Path) -> Result<BTreeMap<String, CatalogAd>> {
    let mut ads = BTreeMap::new();
    for (i, line) in data_lines(path)? {
        let f = fields(&line, 4, path, i)?;
        let ad = CatalogAd { ad_id: f[0].into(), title: f[1].into(), description: f[2].into(), display_url: f[3].into() };
        ads.insert(ad.ad_id.clone(), ad);
    }
    Ok(ads)
}

/// Training-set occurrences of every normalized query.
pub fn query_frequencies(records: &[CohortRecord]) -> BTreeMap<String, u64> {
    let mut freq = BTreeMap::new();
    for r in records {
        *freq.entry(normalize_text(&r.query_text).join(" ")).or_default() += 1;
    }
    freq
}

/// `query<TAB>count`, no header.
pub fn write_frequencies(path: &Path, freq: &BTreeMap<String, u64>) -> Result<()> {
    let mut out = String::new();
    for (q, c) in freq {
        writeln!(out, "{q}\t{c}").expect("string write");
    }
    write_text(path, &out)
}

pub fn read_frequencies(path: &Path) -> Result<BTreeMap<String, u64>> {
    let mut freq = BTreeMap::new();
    for (i, line) in data_lines(path)? {
        let f = fields(&line, 2, path, i)?;
        freq.insert(f[0].to_string(), num(f[1], path, i)?);
    }
    Ok(freq)
}
