//! Synthetic cohort logs with planted topic relevance and position-biased
//! clicks.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::math;
use crate::metrics;
use crate::text::{AdImpression, CohortRecord, MAX_ADS};
use crate::{Error, Result};

/// Unique-query shares of the three frequency classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyMix {
    pub head: f64,
    pub torso: f64,
    pub tail: f64,
}

impl Default for FrequencyMix {
    fn default() -> Self {
        Self { head: 0.03, torso: 0.22, tail: 0.75 }
    }
}

/// Training-set occurrence ranges per frequency class.
pub const HEAD_OCCURRENCES: (u64, u64) = (21, 40);
pub const TORSO_OCCURRENCES: (u64, u64) = (5, 20);
pub const TAIL_OCCURRENCES: (u64, u64) = (1, 4);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_topics: usize,
    /// Distinct content words, topic regions plus generic words.
    pub vocab_size: usize,
    /// Unique queries.
    pub n_queries: usize,
    /// Candidate ads per query; served ads are drawn from this pool.
    pub ads_per_query: usize,
    /// Size of the global ad inventory pools draw from.
    pub n_ads: usize,
    /// Share of each pool drawn from ads with the query's primary topic.
    pub on_topic_fraction: f64,
    pub seed: u64,
    pub position_ctrs: [f64; MAX_ADS],
    pub relevance_weight: f64,
    pub mix: FrequencyMix,
    /// Most ads served per search (1..=5).
    pub max_ads_per_search: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_topics: 8,
            vocab_size: 200,
            n_queries: 1200,
            ads_per_query: 8,
            n_ads: 1000,
            on_topic_fraction: 0.5,
            seed: 7,
            position_ctrs: [0.30, 0.15, 0.10, 0.07, 0.05],
            relevance_weight: 3.0,
            mix: FrequencyMix::default(),
            max_ads_per_search: MAX_ADS,
            valid_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

/// Words reserved per topic region at minimum.
pub const MIN_TOPIC_WORDS: usize = 4;

impl GeneratorConfig {
    fn generic_words(&self) -> usize {
        self.vocab_size / 10
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_topics == 0 {
            return bad("n_topics must be at least 1".into());
        }
        if self.vocab_size < self.n_topics * MIN_TOPIC_WORDS + self.generic_words() {
            return bad(format!(
                "vocab_size {} is too small for {} topics (need {} words per topic)",
                self.vocab_size, self.n_topics, MIN_TOPIC_WORDS
            ));
        }
        if self.n_queries == 0 || self.n_ads == 0 {
            return bad("n_queries and n_ads must be positive".into());
        }
        if self.ads_per_query == 0 || self.ads_per_query > self.n_ads {
            return bad("ads_per_query must be in 1..=n_ads".into());
        }
        if !(0.0..=1.0).contains(&self.on_topic_fraction) {
            return bad("on_topic_fraction must be in [0, 1]".into());
        }
        if self.position_ctrs.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return bad("position_ctrs must lie in (0, 1)".into());
        }
        if self.position_ctrs.windows(2).any(|w| w[1] >= w[0]) {
            return bad("position_ctrs must be strictly decreasing".into());
        }
        if !self.relevance_weight.is_finite() {
            return bad("relevance_weight must be finite".into());
        }
        let m = self.mix;
        if [m.head, m.torso, m.tail].iter().any(|&x| !(0.0..=1.0).contains(&x)) || (m.head + m.torso + m.tail - 1.0).abs() > 1e-9 {
            return bad("mix shares must be in [0, 1] and sum to 1".into());
        }
        if self.max_ads_per_search == 0 || self.max_ads_per_search > MAX_ADS {
            return bad(format!("max_ads_per_search must be in 1..={MAX_ADS}"));
        }
        let held = self.valid_fraction + self.test_fraction;
        if self.valid_fraction < 0.0 || self.test_fraction < 0.0 || held >= 1.0 {
            return bad("valid_fraction and test_fraction must be non-negative and sum below 1".into());
        }
        Ok(())
    }
}

/// An inventory ad.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogAd {
    pub ad_id: String,
    pub title: String,
    pub description: String,
    pub display_url: String,
}

/// One graded query-ad pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub query: String,
    pub ad_id: String,
    pub relevance: f64,
    pub grade: u8,
}

/// Records of one split with the generator's click probability of every impression.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub records: Vec<CohortRecord>,
    /// Aligned with `records[i].ads`.
    pub click_probs: Vec<Vec<f64>>,
}

impl Split {
    pub fn n_impressions(&self) -> usize {
        self.records.iter().map(|r| r.ads.len()).sum()
    }

    /// `(probability, clicked, position)` for every impression.
    pub fn impressions(&self) -> impl Iterator<Item = (f64, bool, u8)> + '_ {
        self.records.iter().zip(&self.click_probs).flat_map(|(r, p)| r.ads.iter().zip(p).map(|(a, &p)| (p, a.clicked, a.position)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Split,
    pub valid: Split,
    pub test: Split,
    /// Every pool pair, grouped by query.
    pub ground_truth: Vec<GroundTruthRow>,
    pub ads: Vec<CatalogAd>,
}

impl Corpus {
    /// Graded candidate lists keyed by query text, in ground-truth order.
    pub fn graded_pools(&self) -> BTreeMap<&str, Vec<&GroundTruthRow>> {
        let mut out: BTreeMap<&str, Vec<&GroundTruthRow>> = BTreeMap::new();
        for row in &self.ground_truth {
            out.entry(row.query.as_str()).or_default().push(row);
        }
        out
    }
}

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn make_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*CONSONANTS.choose(rng).unwrap() as char);
            w.push(*VOWELS.choose(rng).unwrap() as char);
        }
        if rng.random_bool(0.3) {
            w.push(*CONSONANTS.choose(rng).unwrap() as char);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct Lexicon {
    topics: Vec<Vec<String>>,
    generic: Vec<String>,
}

impl Lexicon {
    fn new(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let n_generic = cfg.generic_words();
        let words = make_words(cfg.vocab_size, rng);
        let (generic, topical) = words.split_at(n_generic);
        let per = topical.len() / cfg.n_topics;
        let topics = (0..cfg.n_topics).map(|t| topical[t * per..(t + 1) * per].to_vec()).collect();
        Self { topics, generic: generic.to_vec() }
    }

    fn word(&self, mixture: &[f64], generic_prob: f64, rng: &mut ChaCha8Rng) -> String {
        if !self.generic.is_empty() && rng.random_bool(generic_prob) {
            return self.generic.choose(rng).unwrap().clone();
        }
        let topic = sample_index(mixture, rng);
        self.topics[topic].choose(rng).unwrap().clone()
    }

    fn phrase(&self, mixture: &[f64], len: usize, generic_prob: f64, rng: &mut ChaCha8Rng) -> String {
        let words: Vec<String> = (0..len).map(|_| self.word(mixture, generic_prob, rng)).collect();
        words.join(" ")
    }
}

fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Topic mixture dominated by `primary`, with the remainder on one or two
/// other topics.
fn mixture(n_topics: usize, primary: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut m = alloc::vec![0.0; n_topics];
    if n_topics == 1 {
        m[0] = 1.0;
        return m;
    }
    let main = rng.random_range(0.6..0.9);
    m[primary] = main;
    let extra = rng.random_range(1..=2usize.min(n_topics - 1));
    let mut rest = 1.0 - main;
    for k in 0..extra {
        let mut t = rng.random_range(0..n_topics);
        while t == primary {
            t = rng.random_range(0..n_topics);
        }
        let share = if k + 1 == extra { rest } else { rest * rng.random_range(0.3..0.7) };
        m[t] += share;
        rest -= share;
    }
    m
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / math::sqrt(na * nb)).clamp(0.0, 1.0)
    }
}

struct QuerySpec {
    text: String,
    /// `(ad index, relevance)`.
    pool: Vec<(usize, f64)>,
    train_count: u64,
}

/// Grades 0..=5 by relevance quantile; tied relevances share the grade of
/// their first rank.
pub fn quantile_grades(relevance: &[f64]) -> Vec<u8> {
    let n = relevance.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| relevance[a].total_cmp(&relevance[b]));
    let mut grades = alloc::vec![0u8; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && relevance[idx[j + 1]] == relevance[idx[i]] {
            j += 1;
        }
        let g = ((6 * i) / n).min(5) as u8;
        for &k in &idx[i..=j] {
            grades[k] = g;
        }
        i = j + 1;
    }
    grades
}

fn occurrence_range(rng: &mut ChaCha8Rng, (lo, hi): (u64, u64)) -> u64 {
    rng.random_range(lo..=hi)
}

/// Generates a corpus; identical configs give identical corpora.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lex = Lexicon::new(cfg, &mut rng);

    let mut ads = Vec::with_capacity(cfg.n_ads);
    let mut ad_mix = Vec::with_capacity(cfg.n_ads);
    let mut by_topic: Vec<Vec<usize>> = alloc::vec![Vec::new(); cfg.n_topics];
    for i in 0..cfg.n_ads {
        let primary = i % cfg.n_topics;
        let m = mixture(cfg.n_topics, primary, &mut rng);
        let title_len = rng.random_range(2..=4);
        let desc_len = rng.random_range(3..=5);
        let title = lex.phrase(&m, title_len, 0.15, &mut rng);
        let description = lex.phrase(&m, desc_len, 0.3, &mut rng);
        let url_word = lex.word(&m, 0.0, &mut rng);
        ads.push(CatalogAd { ad_id: format!("ad{i:05}"), title, description, display_url: format!("www.{url_word}.com") });
        by_topic[primary].push(i);
        ad_mix.push(m);
    }

    let n = cfg.n_queries;
    let n_head = math::round(cfg.mix.head * n as f64) as usize;
    let n_torso = (math::round(cfg.mix.torso * n as f64) as usize).min(n - n_head.min(n));
    let mut classes: Vec<u8> = (0..n)
        .map(|i| {
            if i < n_head {
                0
            } else if i < n_head + n_torso {
                1
            } else {
                2
            }
        })
        .collect();
    classes.shuffle(&mut rng);

    let mut seen_queries = BTreeSet::new();
    let mut queries = Vec::with_capacity(n);
    for &class in &classes {
        let primary = rng.random_range(0..cfg.n_topics);
        let m = mixture(cfg.n_topics, primary, &mut rng);
        let text = loop {
            let len = rng.random_range(1..=4);
            let t = lex.phrase(&m, len, 0.05, &mut rng);
            if seen_queries.insert(t.clone()) {
                break t;
            }
        };
        let n_on = math::round(cfg.on_topic_fraction * cfg.ads_per_query as f64) as usize;
        let mut chosen = BTreeSet::new();
        let same = &by_topic[primary];
        let n_on = n_on.min(same.len());
        for &a in same.choose_multiple(&mut rng, n_on) {
            chosen.insert(a);
        }
        while chosen.len() < cfg.ads_per_query {
            chosen.insert(rng.random_range(0..cfg.n_ads));
        }
        let mut pool: Vec<(usize, f64)> = chosen.into_iter().map(|a| (a, cosine(&m, &ad_mix[a]))).collect();
        pool.shuffle(&mut rng);
        let range = match class {
            0 => HEAD_OCCURRENCES,
            1 => TORSO_OCCURRENCES,
            _ => TAIL_OCCURRENCES,
        };
        let train_count = occurrence_range(&mut rng, range);
        queries.push(QuerySpec { text, pool, train_count });
    }

    let all_rel: Vec<f64> = queries.iter().flat_map(|q| q.pool.iter().map(|p| p.1)).collect();
    let mean_rel = all_rel.iter().sum::<f64>() / all_rel.len() as f64;
    let grades = quantile_grades(&all_rel);
    let mut ground_truth = Vec::with_capacity(all_rel.len());
    let mut gi = 0;
    for q in &queries {
        for &(a, rel) in &q.pool {
            ground_truth.push(GroundTruthRow { query: q.text.clone(), ad_id: ads[a].ad_id.clone(), relevance: rel, grade: grades[gi] });
            gi += 1;
        }
    }

    // held-out occurrences scale with training frequency
    let train_share = 1.0 - cfg.valid_fraction - cfg.test_fraction;
    let mut events: Vec<(usize, u8)> = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        for _ in 0..q.train_count {
            events.push((qi, 0));
        }
        for (split, frac) in [(1u8, cfg.valid_fraction), (2u8, cfg.test_fraction)] {
            let p = (frac / train_share).min(1.0);
            let k = if p > 0.0 { Binomial::new(q.train_count, p).map_err(|e| Error::Config(format!("{e}")))?.sample(&mut rng) } else { 0 };
            for _ in 0..k {
                events.push((qi, split));
            }
        }
    }
    events.shuffle(&mut rng);

    let order_noise = Normal::new(0.0, 0.2).map_err(|e| Error::Config(format!("{e}")))?;
    let base_logits: Vec<f64> = cfg.position_ctrs.iter().map(|&p| math::logit(p)).collect();
    let mut splits = [Split::default(), Split::default(), Split::default()];
    for (ei, &(qi, split)) in events.iter().enumerate() {
        let q = &queries[qi];
        let k = rng.random_range(1..=cfg.max_ads_per_search.min(q.pool.len()));
        let mut served: Vec<(usize, f64, f64)> =
            q.pool.choose_multiple(&mut rng, k).map(|&(a, rel)| (a, rel, rel + order_noise.sample(&mut rng))).collect();
        served.sort_by(|x, y| y.2.total_cmp(&x.2));
        let mut impressions = Vec::with_capacity(k);
        let mut probs = Vec::with_capacity(k);
        for (pos, &(a, rel, _)) in served.iter().enumerate() {
            let p = math::sigmoid(base_logits[pos] + cfg.relevance_weight * (rel - mean_rel));
            let clicked = rng.random_bool(p);
            let ad = &ads[a];
            impressions.push(AdImpression {
                position: pos as u8 + 1,
                title: ad.title.clone(),
                description: ad.description.clone(),
                display_url: ad.display_url.clone(),
                clicked,
            });
            probs.push(p);
        }
        let s = &mut splits[split as usize];
        s.records.push(CohortRecord { search_id: format!("s{ei:07}"), query_text: q.text.clone(), ads: impressions });
        s.click_probs.push(probs);
    }
    let [train, valid, test] = splits;
    Ok(Corpus { train, valid, test, ground_truth, ads })
}

/// AUC of the generator's click probabilities against the sampled clicks.
pub fn bayes_auc_bound(split: &Split) -> Result<f64> {
    let (scores, labels): (Vec<f64>, Vec<f64>) = split.impressions().map(|(p, c, _)| (p, if c { 1.0 } else { 0.0 })).unzip();
    metrics::auc(&scores, &labels)
}

/// Empirical click-through rate per position 1..=5 (`None` when unserved).
pub fn ctr_by_position(split: &Split) -> [Option<f64>; MAX_ADS] {
    let mut clicks = [0u64; MAX_ADS];
    let mut shown = [0u64; MAX_ADS];
    for (_, c, pos) in split.impressions() {
        let i = pos as usize - 1;
        shown[i] += 1;
        clicks[i] += c as u64;
    }
    core::array::from_fn(|i| (shown[i] > 0).then(|| clicks[i] as f64 / shown[i] as f64))
}
