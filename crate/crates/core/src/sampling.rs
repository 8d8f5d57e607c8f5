//! Cohort negative sampling.
//!
//! A cohort is a group of searches. Clicked served pairs are positives and
//! unclicked served pairs are observed negatives. When a cohort has fewer
//! observed negatives than positives, extra negatives are synthesized by
//! pairing the query of one search with an ad served for a different search,
//! skipping any (query, ad) that was served anywhere in the cohort.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::losses::matching_loss_on_tape;
use crate::params::ModelParams;
use crate::tensor::Tensor;
use crate::text::EncodedSearch;
use crate::{Error, Result};

/// Whether cross-referenced negatives are synthesized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisPolicy {
    pub enabled: bool,
}

impl Default for SynthesisPolicy {
    fn default() -> Self {
        Self { enabled: true }
    }
}

impl SynthesisPolicy {
    pub fn disabled() -> Self {
        Self { enabled: false }
    }
}

/// Identity keys of one search, the view pair construction works on.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchView<'a> {
    pub query: &'a str,
    /// `(ad identity, clicked)` per served ad.
    pub ads: Vec<(&'a str, bool)>,
}

impl<'a> SearchView<'a> {
    pub fn of(search: &'a EncodedSearch) -> Self {
        let query = search.pairs.first().map_or("", |p| p.query_key.as_str());
        let ads = search.pairs.iter().map(|p| (p.ad_key.as_str(), p.label > 0.5)).collect();
        Self { query, ads }
    }
}

/// A (query, ad) pair within a cohort: the query of search `query`, and ad
/// `ad.1` of search `ad.0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PairRef {
    pub query: usize,
    pub ad: (usize, usize),
}

impl PairRef {
    pub fn served(search: usize, ad: usize) -> Self {
        Self { query: search, ad: (search, ad) }
    }

    pub fn is_served(&self) -> bool {
        self.query == self.ad.0
    }
}

/// Positive and negative pairs of one cohort.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CohortPairs {
    pub positives: Vec<PairRef>,
    pub observed_negatives: Vec<PairRef>,
    pub synthesized_negatives: Vec<PairRef>,
}

impl CohortPairs {
    pub fn negatives(&self) -> impl Iterator<Item = &PairRef> {
        self.observed_negatives.iter().chain(&self.synthesized_negatives)
    }

    pub fn n_negatives(&self) -> usize {
        self.observed_negatives.len() + self.synthesized_negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.n_negatives() == 0
    }
}

/// Maximum number of synthesized negatives for a cohort of `m` searches;
/// strictly below `m(m-1)`.
pub fn synthesis_budget(m: usize) -> usize {
    (m * m.saturating_sub(1)).saturating_sub(1)
}

/// Splits a cohort into positives, observed negatives and, if the policy
/// allows and observed negatives are fewer than positives, synthesized
/// cross pairs drawn uniformly without replacement.
///
/// A (query, ad) identity clicked in any search of the cohort is a positive
/// only; unclicked servings of the same identity are not used as negatives.
pub fn build_cohort_pairs<R: Rng + ?Sized>(cohort: &[SearchView<'_>], policy: SynthesisPolicy, rng: &mut R) -> CohortPairs {
    let mut clicked_ids: BTreeSet<(&str, &str)> = BTreeSet::new();
    let mut served_ids: BTreeSet<(&str, &str)> = BTreeSet::new();
    for s in cohort {
        for &(ad, clicked) in &s.ads {
            served_ids.insert((s.query, ad));
            if clicked {
                clicked_ids.insert((s.query, ad));
            }
        }
    }
    let mut pairs = CohortPairs::default();
    for (i, s) in cohort.iter().enumerate() {
        for (k, &(ad, clicked)) in s.ads.iter().enumerate() {
            if clicked {
                pairs.positives.push(PairRef::served(i, k));
            } else if !clicked_ids.contains(&(s.query, ad)) {
                pairs.observed_negatives.push(PairRef::served(i, k));
            }
        }
    }
    if !policy.enabled || pairs.observed_negatives.len() >= pairs.positives.len() {
        return pairs;
    }
    let m = cohort.len();
    let budget = synthesis_budget(m);
    let need = (pairs.positives.len() - pairs.observed_negatives.len()).min(budget);
    if need == 0 {
        return pairs;
    }
    let mut seen: BTreeSet<(&str, &str)> = BTreeSet::new();
    let mut candidates = Vec::new();
    for (i, qs) in cohort.iter().enumerate() {
        for (j, s) in cohort.iter().enumerate() {
            if i == j {
                continue;
            }
            for (k, &(ad, _)) in s.ads.iter().enumerate() {
                let id = (qs.query, ad);
                if !served_ids.contains(&id) && seen.insert(id) {
                    candidates.push(PairRef { query: i, ad: (j, k) });
                }
            }
        }
    }
    let take = need.min(candidates.len());
    let (chosen, _) = candidates.partial_shuffle(rng, take);
    pairs.synthesized_negatives = chosen.to_vec();
    pairs
}

/// A small, fully enumerable matching problem: each search has a query
/// feature vector and ads with feature vectors and click labels, and the
/// model maps features linearly to `h_q = W_q^T x_q`, `h_a = W_a^T x_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingPopulation {
    pub searches: Vec<PopulationSearch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSearch {
    pub query_key: String,
    pub query_features: Vec<f64>,
    /// `(ad key, features, clicked)`.
    pub ads: Vec<(String, Vec<f64>, bool)>,
}

impl MatchingPopulation {
    /// Random population with distinct queries and ads; ad `a` of search
    /// `s` is clicked when `s + a` is even.
    pub fn random<R: Rng + ?Sized>(n_searches: usize, ads_per_search: usize, feature_dim: usize, rng: &mut R) -> Self {
        let mut searches = Vec::with_capacity(n_searches);
        for s in 0..n_searches {
            let query_features = (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut ads = Vec::with_capacity(ads_per_search);
            for a in 0..ads_per_search {
                let feat = (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                ads.push((format!("a{s}_{a}"), feat, (s + a) % 2 == 0));
            }
            searches.push(PopulationSearch { query_key: format!("q{s}"), query_features, ads });
        }
        Self { searches }
    }

    pub fn feature_dim(&self) -> usize {
        self.searches.first().map_or(0, |s| s.query_features.len())
    }

    fn views(&self, idx: &[usize]) -> Vec<SearchView<'_>> {
        idx.iter()
            .map(|&i| {
                let s = &self.searches[i];
                SearchView { query: &s.query_key, ads: s.ads.iter().map(|(k, _, c)| (k.as_str(), *c)).collect() }
            })
            .collect()
    }

    /// Initial `W_q`, `W_a` of shape `[feature_dim, embed_dim]`.
    pub fn init_params<R: Rng + ?Sized>(&self, embed_dim: usize, rng: &mut R) -> ModelParams {
        let f = self.feature_dim();
        let mut p = ModelParams::new();
        for name in ["w_a", "w_q"] {
            let data = (0..f * embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            p.insert(name, Tensor::new(vec![f, embed_dim], data).expect("consistent shape"));
        }
        p
    }

    /// Gradient of the matching loss over the cohort formed by `idx`
    /// (search indices, repeats allowed).
    pub fn cohort_gradient<R: Rng + ?Sized>(&self, params: &ModelParams, idx: &[usize], policy: SynthesisPolicy, rng: &mut R) -> Result<Vec<f64>> {
        let views = self.views(idx);
        let pairs = build_cohort_pairs(&views, policy, rng);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let (wq, wa) = (vars.get("w_q")?, vars.get("w_a")?);
        let mut hq = Vec::with_capacity(idx.len());
        let mut ha: Vec<Vec<Var>> = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = &self.searches[i];
            let xq = tape.constant(Tensor::vector(s.query_features.clone()));
            hq.push(tape.matmul(xq, wq)?);
            let mut row = Vec::new();
            for (_, feat, _) in &s.ads {
                let xa = tape.constant(Tensor::vector(feat.clone()));
                row.push(tape.matmul(xa, wa)?);
            }
            ha.push(row);
        }
        let resolve = |p: &PairRef| (hq[p.query], ha[p.ad.0][p.ad.1]);
        let pos: Vec<_> = pairs.positives.iter().map(resolve).collect();
        let neg: Vec<_> = pairs.negatives().map(resolve).collect();
        if pos.is_empty() && neg.is_empty() {
            return Ok(vec![0.0; params.num_coordinates()]);
        }
        let loss = matching_loss_on_tape(&mut tape, &pos, &neg)?;
        let grads = tape.backward(loss)?;
        let pg = vars.gradients(&grads);
        Ok(pg.iter().flat_map(|(_, t)| t.data().to_vec()).collect())
    }
}

/// One coordinate of a sampling-bias audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateAudit {
    pub name: String,
    pub index: usize,
    pub mean_cohort_gradient: f64,
    pub full_gradient: f64,
    pub std_error: f64,
    pub within_3se: bool,
}

/// Monte-Carlo comparison of the rescaled cohort gradient with the exact
/// full-population gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasAudit {
    pub synthesis: bool,
    pub cohort_size: usize,
    pub n_draws: usize,
    pub coordinates: Vec<CoordinateAudit>,
    pub pass_fraction: f64,
    pub max_abs_deviation: f64,
}

/// Draws `n_draws` cohorts of `cohort_size` searches uniformly with
/// replacement, rescales each cohort gradient by `population / cohort_size`,
/// and compares the mean with the exact full-population gradient (computed
/// with synthesis disabled).
pub fn estimate_sampling_bias(
    population: &MatchingPopulation,
    params: &ModelParams,
    cohort_size: usize,
    n_draws: usize,
    policy: SynthesisPolicy,
    seed: u64,
) -> Result<BiasAudit> {
    if n_draws < 100 {
        return Err(Error::InvalidInput(format!("n_draws = {n_draws}; at least 100 draws are required")));
    }
    let n = population.searches.len();
    if n == 0 || cohort_size == 0 {
        return Err(Error::InvalidInput("empty population or cohort".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..n).collect();
    let full = population.cohort_gradient(params, &all, SynthesisPolicy::disabled(), &mut rng)?;
    let dim = full.len();
    let scale = n as f64 / cohort_size as f64;
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    let mut idx = vec![0usize; cohort_size];
    for _ in 0..n_draws {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        let g = population.cohort_gradient(params, &idx, policy, &mut rng)?;
        for d in 0..dim {
            let v = scale * g[d];
            sum[d] += v;
            sum_sq[d] += v * v;
        }
    }
    let names: Vec<(String, usize)> = params.iter().flat_map(|(k, t)| (0..t.len()).map(move |i| (k.to_string(), i))).collect();
    let nd = n_draws as f64;
    let mut coords = Vec::with_capacity(dim);
    let mut max_dev: f64 = 0.0;
    for d in 0..dim {
        let mean = sum[d] / nd;
        let var = ((sum_sq[d] - nd * mean * mean) / (nd - 1.0)).max(0.0);
        let se = crate::math::sqrt(var / nd);
        let dev = (mean - full[d]).abs();
        max_dev = max_dev.max(dev);
        let tol = 3.0 * se + 1e-12 * (1.0 + full[d].abs());
        coords.push(CoordinateAudit {
            name: names[d].0.clone(),
            index: names[d].1,
            mean_cohort_gradient: mean,
            full_gradient: full[d],
            std_error: se,
            within_3se: dev <= tol,
        });
    }
    let pass = coords.iter().filter(|c| c.within_3se).count() as f64 / dim.max(1) as f64;
    Ok(BiasAudit { synthesis: policy.enabled, cohort_size, n_draws, coordinates: coords, pass_fraction: pass, max_abs_deviation: max_dev })
}

/// Settings of the unbiasedness audit over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub n_searches: usize,
    pub ads_per_search: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub cohort_size: usize,
    pub n_draws: usize,
    /// Seeds `base_seed..base_seed + n_seeds`.
    pub n_seeds: u64,
    pub base_seed: u64,
    pub synthesis: bool,
    /// Required share of coordinates within 3 standard errors, pooled over seeds.
    pub min_pass_fraction: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            n_searches: 4,
            ads_per_search: 2,
            feature_dim: 3,
            embed_dim: 3,
            cohort_size: 2,
            n_draws: 20_000,
            n_seeds: 10,
            base_seed: 0,
            synthesis: false,
            min_pass_fraction: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub config: AuditConfig,
    pub per_seed: Vec<BiasAudit>,
    pub pass_fraction: f64,
    /// Only meaningful with synthesis disabled; reporting mode never passes or fails.
    pub passed: Option<bool>,
}

/// Runs [`estimate_sampling_bias`] on a fresh random population per seed.
pub fn run_audit(cfg: &AuditConfig) -> Result<AuditSummary> {
    let policy = SynthesisPolicy { enabled: cfg.synthesis };
    let mut per_seed = Vec::new();
    for seed in cfg.base_seed..cfg.base_seed + cfg.n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pop = MatchingPopulation::random(cfg.n_searches, cfg.ads_per_search, cfg.feature_dim, &mut rng);
        let params = pop.init_params(cfg.embed_dim, &mut rng);
        per_seed.push(estimate_sampling_bias(&pop, &params, cfg.cohort_size, cfg.n_draws, policy, seed)?);
    }
    let (hit, total) =
        per_seed.iter().fold((0usize, 0usize), |(h, t), a| (h + a.coordinates.iter().filter(|c| c.within_3se).count(), t + a.coordinates.len()));
    let pass_fraction = if total == 0 { 0.0 } else { hit as f64 / total as f64 };
    let passed = (!cfg.synthesis).then_some(pass_fraction >= cfg.min_pass_fraction);
    Ok(AuditSummary { config: cfg.clone(), per_seed, pass_fraction, passed })
}
