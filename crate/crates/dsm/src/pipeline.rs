//! Glue between files and the core: trained-model bundles, scoring of
//! cohort files and graded sets.

use std::collections::BTreeMap;
use std::path::Path;

use dsm_core::baselines::bm25::{bm25_score, Bm25Stats};
use dsm_core::baselines::lm::{LmConfig, LmModel};
use dsm_core::metrics::{decompose_eval, MetricsReport, QueryRanking, ScoredImpression};
use dsm_core::network::{dsm_forward, predict_logits, NetworkConfig};
use dsm_core::synth::{CatalogAd, GroundTruthRow};
use dsm_core::text::{ad_words, encode_pair, encode_search, normalize_text, AdImpression, CohortRecord, EncodedPair, EncodedSearch, Vocab};
use dsm_core::{math, ModelParams};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, check_against, DSM_MAGIC, LM_MAGIC};
use crate::config::Bm25Options;
use crate::{Error, Result};

/// Metadata stored beside the parameters of a DSM checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsmMeta {
    pub network: NetworkConfig,
    pub vocab: Vec<String>,
    pub min_count: u64,
    /// Accuracy threshold chosen on validation.
    pub threshold: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsmModel {
    pub params: ModelParams,
    pub meta: DsmMeta,
    pub vocab: Vocab,
}

fn meta_json<T: Serialize>(meta: &T) -> serde_json::Value {
    serde_json::to_value(meta).expect("metadata serializes")
}

fn meta_from<T: for<'de> Deserialize<'de>>(path: &Path, value: serde_json::Value) -> Result<T> {
    serde_json::from_value(value)
        .map_err(|e| Error::Checkpoint { path: path.into(), source: crate::CheckpointError::Manifest(format!("metadata: {e}")) })
}

impl DsmModel {
    pub fn new(params: ModelParams, meta: DsmMeta) -> Self {
        let vocab = Vocab::from_tokens(meta.vocab.clone(), meta.min_count);
        Self { params, meta, vocab }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(path, DSM_MAGIC, &self.params, &meta_json(&self.meta))
    }

    /// Loads a checkpoint and checks every tensor against the shapes its
    /// network config and vocabulary imply.
    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = checkpoint::load_checkpoint(path, DSM_MAGIC)?;
        let meta: DsmMeta = meta_from(path, meta)?;
        let model = Self::new(params, meta);
        model.check_shapes(&model.meta.network).map_err(|source| Error::Checkpoint { path: path.into(), source })?;
        Ok(model)
    }

    /// Compares the stored tensors with the layout `net` implies.
    pub fn check_shapes(&self, net: &NetworkConfig) -> std::result::Result<(), crate::CheckpointError> {
        let mut expected = ModelParams::new();
        for (name, shape) in net.param_shapes(self.vocab.len()) {
            expected.insert(name, dsm_core::Tensor::zeros(&shape));
        }
        check_against(&self.params, &expected)
    }

    pub fn encode(&self, records: &[CohortRecord]) -> Vec<EncodedSearch> {
        encode_records(records, &self.vocab, &self.meta.network)
    }

    /// Final-layer logit of every (query, ad) pair.
    pub fn logits(&self, pairs: &[EncodedPair]) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        Ok(dsm_forward(pairs, &self.params, &self.meta.network)?.into_iter().map(|o| o.logit).collect())
    }

    /// Click probabilities of every served pair, flattened in file order.
    pub fn probabilities(&self, searches: &[EncodedSearch]) -> Result<Vec<f64>> {
        let logits = predict_logits(searches, &self.params, &self.meta.network)?;
        Ok(logits.into_iter().flatten().map(math::sigmoid).collect())
    }
}

pub fn encode_records(records: &[CohortRecord], vocab: &Vocab, net: &NetworkConfig) -> Vec<EncodedSearch> {
    records.iter().map(|r| encode_search(r, vocab, net.l_q, net.l_a)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmMeta {
    pub config: LmConfig,
    pub vocab: Vec<String>,
    pub min_count: u64,
    pub l_q: usize,
    pub l_a: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmBundle {
    pub model: LmModel,
    pub meta: LmMeta,
    pub vocab: Vocab,
}

impl LmBundle {
    pub fn new(model: LmModel, meta: LmMeta) -> Self {
        let vocab = Vocab::from_tokens(meta.vocab.clone(), meta.min_count);
        Self { model, meta, vocab }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(path, LM_MAGIC, &self.model.params, &meta_json(&self.meta))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = checkpoint::load_checkpoint(path, LM_MAGIC)?;
        let meta: LmMeta = meta_from(path, meta)?;
        let mut fresh = LmModel::new(meta.vocab.len(), &meta.config)?;
        check_against(&params, &fresh.params).map_err(|source| Error::Checkpoint { path: path.into(), source })?;
        fresh.params = params;
        Ok(Self::new(fresh, meta))
    }

    pub fn encode(&self, records: &[CohortRecord]) -> Vec<EncodedSearch> {
        records.iter().map(|r| encode_search(r, &self.vocab, self.meta.l_q, self.meta.l_a)).collect()
    }

    pub fn probabilities(&self, searches: &[EncodedSearch]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for p in searches.iter().flat_map(|s| &s.pairs) {
            out.push(self.model.predict(p)?);
        }
        Ok(out)
    }
}

/// Classification report with frequency and position decompositions.
pub fn scored_report(searches: &[EncodedSearch], scores: &[f64], frequency: &BTreeMap<String, u64>, threshold: f64) -> MetricsReport {
    let pairs: Vec<&EncodedPair> = searches.iter().flat_map(|s| &s.pairs).collect();
    let labels: Vec<f64> = pairs.iter().map(|p| p.label).collect();
    let mut report = MetricsReport::classification(scores, &labels, threshold);
    let impressions: Vec<ScoredImpression> = pairs
        .iter()
        .zip(scores)
        .map(|(p, &score)| ScoredImpression { score, label: p.label, position: p.position, query_key: p.query_key.clone() })
        .collect();
    report.buckets = Some(decompose_eval(&impressions, frequency));
    report
}

fn catalog_impression(ad: &CatalogAd) -> AdImpression {
    AdImpression { position: 1, title: ad.title.clone(), description: ad.description.clone(), display_url: ad.display_url.clone(), clicked: false }
}

/// One query and its graded candidate ads.
pub type GradedPool<'a> = (&'a str, Vec<(u8, &'a CatalogAd)>);

/// Graded candidates grouped by query, in file order, with the ad text of each.
pub fn graded_pools<'a>(rows: &'a [GroundTruthRow], ads: &'a BTreeMap<String, CatalogAd>) -> Result<Vec<GradedPool<'a>>> {
    let mut order: Vec<&str> = Vec::new();
    let mut pools: BTreeMap<&str, Vec<(u8, &CatalogAd)>> = BTreeMap::new();
    for r in rows {
        let ad = ads.get(&r.ad_id).ok_or_else(|| Error::Data(format!("ad {} missing from the ad catalog", r.ad_id)))?;
        let entry = pools.entry(r.query.as_str()).or_insert_with(|| {
            order.push(r.query.as_str());
            Vec::new()
        });
        entry.push((r.grade, ad));
    }
    Ok(order.into_iter().map(|q| (q, pools.remove(q).unwrap_or_default())).collect())
}

/// Ranks every graded pool by DSM final-layer logits.
pub fn rank_with_dsm(model: &DsmModel, pools: &[GradedPool<'_>]) -> Result<Vec<QueryRanking>> {
    let net = &model.meta.network;
    let mut out = Vec::with_capacity(pools.len());
    for (query, cands) in pools {
        let pairs: Vec<EncodedPair> =
            cands.iter().map(|(_, ad)| encode_pair(query, &catalog_impression(ad), &model.vocab, net.l_q, net.l_a)).collect();
        let logits = model.logits(&pairs)?;
        out.push(QueryRanking { query: query.to_string(), candidates: cands.iter().zip(logits).map(|((g, _), s)| (*g, s)).collect() });
    }
    Ok(out)
}

/// Ranks every graded pool by LM logits.
pub fn rank_with_lm(lm: &LmBundle, pools: &[GradedPool<'_>]) -> Result<Vec<QueryRanking>> {
    let mut out = Vec::with_capacity(pools.len());
    for (query, cands) in pools {
        let mut candidates = Vec::with_capacity(cands.len());
        for (g, ad) in cands {
            let pair = encode_pair(query, &catalog_impression(ad), &lm.vocab, lm.meta.l_q, lm.meta.l_a);
            candidates.push((*g, lm.model.logit(&pair)?));
        }
        out.push(QueryRanking { query: query.to_string(), candidates });
    }
    Ok(out)
}

/// Ranks every graded pool by BM25 over the ad catalog.
pub fn rank_with_bm25(ads: &BTreeMap<String, CatalogAd>, pools: &[GradedPool<'_>], opts: &Bm25Options) -> Result<Vec<QueryRanking>> {
    let docs: Vec<Vec<String>> = ads.values().map(|a| ad_words(&catalog_impression(a))).collect();
    let mut stats = Bm25Stats::build(&docs)?;
    stats.k1 = opts.k1;
    stats.b = opts.b;
    let mut out = Vec::with_capacity(pools.len());
    for (query, cands) in pools {
        let q = normalize_text(query);
        let candidates = cands.iter().map(|(g, ad)| (*g, bm25_score(&q, &ad_words(&catalog_impression(ad)), &stats))).collect();
        out.push(QueryRanking { query: query.to_string(), candidates });
    }
    Ok(out)
}
