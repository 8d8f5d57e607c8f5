//! Text normalization, vocabularies, and encoding of served query-ad pairs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD_ID: usize = 0;
pub const OOV_ID: usize = 1;
pub const SEP_TOKEN: &str = "[SEP]";
const PAD_TOKEN: &str = "[PAD]";
const OOV_TOKEN: &str = "[OOV]";

/// Maximum number of north ads per search.
pub const MAX_ADS: usize = 5;

/// Lowercases and splits on every non-alphanumeric character.
///
/// URL delimiters (`/ . : ? = & _ -`) are non-alphanumeric, so display URLs
/// split into their components under the same rule.
pub fn normalize_text(raw: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in raw.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            tokens.push(core::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

/// [`normalize_text`] over raw bytes; invalid UTF-8 sequences act as spaces.
pub fn normalize_bytes(raw: &[u8]) -> Vec<String> {
    normalize_text(&String::from_utf8_lossy(raw))
}

/// Token vocabulary. Id 0 is padding, id 1 out-of-vocabulary, real tokens
/// follow in descending frequency, and the ad-field separator comes last.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    pub min_count: u64,
}

impl Vocab {
    /// Builds a vocabulary from token frequencies; tokens seen fewer than
    /// `min_count` times map to OOV. Ties in frequency are broken
    /// lexicographically.
    pub fn build<'a, I, S>(corpus: I, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a str>,
    {
        if min_count < 1 {
            return Err(Error::InvalidInput("min_count must be at least 1".into()));
        }
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for doc in corpus {
            for tok in doc {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, u64)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = vec![PAD_TOKEN.into(), OOV_TOKEN.into()];
        tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        tokens.push(SEP_TOKEN.into());
        Ok(Self::from_tokens(tokens, min_count))
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>, min_count: u64) -> Self {
        let index = tokens.iter().enumerate().skip(2).map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index, min_count }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sep_id(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Id of a normalized token; OOV when absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// One served north ad.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdImpression {
    pub position: u8,
    pub title: String,
    pub description: String,
    pub display_url: String,
    pub clicked: bool,
}

/// One search event: a query and the ads served for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortRecord {
    pub search_id: String,
    #[serde(rename = "query")]
    pub query_text: String,
    pub ads: Vec<AdImpression>,
}

impl CohortRecord {
    /// Checks 1..=5 ads with distinct positions in 1..=5.
    pub fn validate(&self) -> Result<()> {
        if self.ads.is_empty() || self.ads.len() > MAX_ADS {
            return Err(Error::InvalidInput(format!("search {} has {} ads (expected 1..={MAX_ADS})", self.search_id, self.ads.len())));
        }
        let mut seen = [false; MAX_ADS + 1];
        for ad in &self.ads {
            let p = ad.position as usize;
            if !(1..=MAX_ADS).contains(&p) {
                return Err(Error::InvalidInput(format!("search {} has ad at position {p}", self.search_id)));
            }
            if seen[p] {
                return Err(Error::InvalidInput(format!("search {} repeats position {p}", self.search_id)));
            }
            seen[p] = true;
        }
        Ok(())
    }
}

/// Normalized ad token stream: title, separator, description, separator, URL parts.
pub fn ad_tokens(ad: &AdImpression) -> Vec<String> {
    let mut toks = normalize_text(&ad.title);
    toks.push(SEP_TOKEN.into());
    toks.extend(normalize_text(&ad.description));
    toks.push(SEP_TOKEN.into());
    toks.extend(normalize_text(&ad.display_url));
    toks
}

/// Ad tokens without separators, the document used by bag-of-words scorers.
pub fn ad_words(ad: &AdImpression) -> Vec<String> {
    ad_tokens(ad).into_iter().filter(|t| t != SEP_TOKEN).collect()
}

/// Stable identity of an ad's text.
pub fn ad_key(ad: &AdImpression) -> String {
    ad_tokens(ad).join(" ")
}

/// A padded, masked, fixed-length query-ad pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub query_ids: Vec<usize>,
    pub ad_ids: Vec<usize>,
    pub query_mask: Vec<bool>,
    pub ad_mask: Vec<bool>,
    /// Row-major `l_q x l_a`.
    pub exact_match: Vec<bool>,
    pub label: f64,
    pub position: u8,
    pub query_key: String,
    pub ad_key: String,
}

impl EncodedPair {
    pub fn l_q(&self) -> usize {
        self.query_ids.len()
    }

    pub fn l_a(&self) -> usize {
        self.ad_ids.len()
    }

    pub fn exact(&self, i: usize, j: usize) -> bool {
        self.exact_match[i * self.ad_ids.len() + j]
    }
}

fn pad_ids(tokens: &[String], vocab: &Vocab, len: usize) -> (Vec<usize>, Vec<bool>) {
    let mut ids = vec![PAD_ID; len];
    let mut mask = vec![false; len];
    for (i, t) in tokens.iter().take(len).enumerate() {
        ids[i] = if t == SEP_TOKEN { vocab.sep_id() } else { vocab.id(t) };
        mask[i] = true;
    }
    (ids, mask)
}

/// Encodes a query and one served ad into fixed-length model input.
///
/// Exact matches compare normalized strings before OOV mapping, so two
/// distinct rare words never match.
pub fn encode_pair(query_text: &str, ad: &AdImpression, vocab: &Vocab, l_q: usize, l_a: usize) -> EncodedPair {
    let q = normalize_text(query_text);
    let a = ad_tokens(ad);
    encode_tokens(&q, &a, vocab, l_q, l_a, if ad.clicked { 1.0 } else { 0.0 }, ad.position)
}

pub(crate) fn encode_tokens(q: &[String], a: &[String], vocab: &Vocab, l_q: usize, l_a: usize, label: f64, position: u8) -> EncodedPair {
    let (query_ids, query_mask) = pad_ids(q, vocab, l_q);
    let (ad_ids, ad_mask) = pad_ids(a, vocab, l_a);
    let mut exact_match = vec![false; l_q * l_a];
    for (i, qt) in q.iter().take(l_q).enumerate() {
        for (j, at) in a.iter().take(l_a).enumerate() {
            exact_match[i * l_a + j] = qt == at;
        }
    }
    EncodedPair { query_ids, ad_ids, query_mask, ad_mask, exact_match, label, position, query_key: q.join(" "), ad_key: a.join(" ") }
}

/// All served pairs of one search, encoded; the unit cohorts are built from.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSearch {
    pub search_id: String,
    pub pairs: Vec<EncodedPair>,
}

pub fn encode_search(record: &CohortRecord, vocab: &Vocab, l_q: usize, l_a: usize) -> EncodedSearch {
    let q = normalize_text(&record.query_text);
    let pairs = record
        .ads
        .iter()
        .map(|ad| {
            let a = ad_tokens(ad);
            encode_tokens(&q, &a, vocab, l_q, l_a, if ad.clicked { 1.0 } else { 0.0 }, ad.position)
        })
        .collect();
    EncodedSearch { search_id: record.search_id.clone(), pairs }
}

/// Token streams (query and every ad) of a set of records, for vocabulary building.
pub fn corpus_tokens(records: &[CohortRecord]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for r in records {
        out.push(normalize_text(&r.query_text));
        for ad in &r.ads {
            out.push(ad_words(ad));
        }
    }
    out
}

/// Builds a vocabulary over the queries and ads of `records`.
pub fn build_vocab(records: &[CohortRecord], min_count: u64) -> Result<Vocab> {
    let docs = corpus_tokens(records);
    Vocab::build(docs.iter().map(|d| d.iter().map(String::as_str)), min_count)
}
