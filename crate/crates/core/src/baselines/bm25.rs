//! Okapi BM25 over ad documents.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Error, Result};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

/// Corpus statistics of the candidate documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Stats {
    pub doc_freq: BTreeMap<String, u64>,
    pub n_docs: u64,
    pub avg_len: f64,
    pub k1: f64,
    pub b: f64,
}

impl Bm25Stats {
    pub fn build<D, T>(docs: &[D]) -> Result<Self>
    where
        D: AsRef<[T]>,
        T: AsRef<str>,
    {
        if docs.is_empty() {
            return Err(Error::InvalidInput("BM25 needs a non-empty corpus".into()));
        }
        let mut doc_freq: BTreeMap<String, u64> = BTreeMap::new();
        let mut total_len = 0usize;
        for d in docs {
            let d = d.as_ref();
            total_len += d.len();
            let uniq: BTreeSet<&str> = d.iter().map(|t| t.as_ref()).collect();
            for t in uniq {
                *doc_freq.entry(t.into()).or_default() += 1;
            }
        }
        Ok(Self { doc_freq, n_docs: docs.len() as u64, avg_len: total_len as f64 / docs.len() as f64, k1: DEFAULT_K1, b: DEFAULT_B })
    }

    /// `ln((N - df + 0.5) / (df + 0.5) + 1)`.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        let n = self.n_docs as f64;
        math::ln((n - df + 0.5) / (df + 0.5) + 1.0)
    }
}

/// Sums the saturated, length-normalized term weight over query terms,
/// repeated terms counted every time.
pub fn bm25_score<Q: AsRef<str>, A: AsRef<str>>(query: &[Q], doc: &[A], stats: &Bm25Stats) -> f64 {
    let mut tf: BTreeMap<&str, f64> = BTreeMap::new();
    for t in doc {
        *tf.entry(t.as_ref()).or_default() += 1.0;
    }
    let len_norm = if stats.avg_len > 0.0 { doc.len() as f64 / stats.avg_len } else { 0.0 };
    let denom_base = stats.k1 * (1.0 - stats.b + stats.b * len_norm);
    query
        .iter()
        .map(|q| match tf.get(q.as_ref()) {
            Some(&f) => stats.idf(q.as_ref()) * f * (stats.k1 + 1.0) / (f + denom_base),
            None => 0.0,
        })
        .sum()
}
