//! Classification, calibration and ranking metrics, the paired
//! signed-rank test, and decompositions by query frequency and ad position.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Error, Result};

fn sorted_indices(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Area under the ROC curve by rank sum, ties counted one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("AUC needs both classes".into()));
    }
    let idx = sorted_indices(scores);
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their midrank
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] > 0.5 {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fraction of examples on the correct side of `threshold` (`score >= threshold` is a click).
pub fn accuracy_at(scores: &[f64], labels: &[f64], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let correct = scores.iter().zip(labels).filter(|(&s, &y)| (s >= threshold) == (y > 0.5)).count();
    correct as f64 / scores.len() as f64
}

/// Threshold maximizing accuracy, scanning midpoints of sorted unique
/// scores plus one threshold below and one above every score.
pub fn best_threshold(scores: &[f64], labels: &[f64]) -> Result<(f64, f64)> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::InvalidInput("threshold search needs equal non-empty inputs".into()));
    }
    let idx = sorted_indices(scores);
    let n = scores.len();
    let total_pos = labels.iter().filter(|&&y| y > 0.5).count();
    // threshold below every score: all predicted positive
    let mut best_correct = total_pos;
    let mut best_t = scores[idx[0]] - 1.0;
    let mut neg_below = 0usize;
    let mut pos_below = 0usize;
    let mut i = 0;
    while i < n {
        let v = scores[idx[i]];
        while i < n && scores[idx[i]] == v {
            if labels[idx[i]] > 0.5 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
        let correct = neg_below + (total_pos - pos_below);
        let t = if i < n { 0.5 * (v + scores[idx[i]]) } else { v + 1.0 };
        if correct > best_correct {
            best_correct = correct;
            best_t = t;
        }
    }
    Ok((best_t, best_correct as f64 / n as f64))
}

/// How the accuracy threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Fixed(f64),
    #[default]
    MaximizeOnValidation,
}

/// Accuracy on the test split together with the threshold used; in
/// maximize mode the threshold is chosen on the validation split.
pub fn accuracy_at_threshold(
    test_scores: &[f64],
    test_labels: &[f64],
    validation: Option<(&[f64], &[f64])>,
    mode: ThresholdMode,
) -> Result<(f64, f64)> {
    if test_scores.is_empty() {
        return Err(Error::InvalidInput("accuracy over zero examples".into()));
    }
    let t = match mode {
        ThresholdMode::Fixed(t) => t,
        ThresholdMode::MaximizeOnValidation => {
            let (vs, vl) = validation.unwrap_or((test_scores, test_labels));
            best_threshold(vs, vl)?.0
        }
    };
    Ok((accuracy_at(test_scores, test_labels, t), t))
}

/// Ratio of predicted to observed clicks.
pub fn prediction_bias(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let clicks: f64 = labels.iter().sum();
    if clicks <= 0.0 {
        return Err(Error::InvalidInput("bias is undefined without clicks".into()));
    }
    Ok(scores.iter().sum::<f64>() / clicks)
}

/// Editorial relevance grades, 5 (perfect) down to 0 (irrelevant).
pub const MAX_GRADE: u8 = 5;
/// Default relevance cut for precision: grade 3 ("relevant") and above.
pub const DEFAULT_RELEVANT_GRADE: u8 = 3;

/// Graded candidates of one query with model scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query: String,
    /// `(grade, score)` per candidate; model order is score descending, ties
    /// keeping list order.
    pub candidates: Vec<(u8, f64)>,
}

impl QueryRanking {
    pub fn model_order(&self) -> Vec<u8> {
        let mut idx: Vec<usize> = (0..self.candidates.len()).collect();
        idx.sort_by(|&a, &b| self.candidates[b].1.total_cmp(&self.candidates[a].1));
        idx.into_iter().map(|i| self.candidates[i].0).collect()
    }
}

/// Per-query values of a ranking metric and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetric {
    pub per_query: Vec<f64>,
    pub mean: f64,
    /// Queries skipped for having no candidates.
    pub skipped: usize,
}

fn dcg(grades: &[u8], k: usize) -> f64 {
    grades.iter().take(k).enumerate().map(|(r, &g)| (math::powf(2.0, g as f64) - 1.0) / math::log2(r as f64 + 2.0)).sum()
}

fn check_grades(rankings: &[QueryRanking]) -> Result<()> {
    for q in rankings {
        if q.candidates.iter().any(|&(g, _)| g > MAX_GRADE) {
            return Err(Error::InvalidInput(format!("query {} has a grade above {MAX_GRADE}", q.query)));
        }
    }
    Ok(())
}

fn summarize(per_query: Vec<f64>, skipped: usize) -> RankingMetric {
    let mean = if per_query.is_empty() { 0.0 } else { per_query.iter().sum::<f64>() / per_query.len() as f64 };
    RankingMetric { per_query, mean, skipped }
}

/// NDCG@k with gain `2^grade - 1` and discount `1 / log2(rank + 1)`.
/// Queries whose ideal DCG is zero score 1.
pub fn ndcg_at_k(rankings: &[QueryRanking], k: usize) -> Result<RankingMetric> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    check_grades(rankings)?;
    let mut per_query = Vec::with_capacity(rankings.len());
    let mut skipped = 0;
    for q in rankings {
        if q.candidates.is_empty() {
            skipped += 1;
            continue;
        }
        let model = q.model_order();
        let mut ideal = model.clone();
        ideal.sort_by(|a, b| b.cmp(a));
        let idcg = dcg(&ideal, k);
        per_query.push(if idcg == 0.0 { 1.0 } else { dcg(&model, k) / idcg });
    }
    Ok(summarize(per_query, skipped))
}

/// Precision@k: fraction of the top `min(k, len)` candidates with grade at
/// least `relevant_grade`.
pub fn precision_at_k(rankings: &[QueryRanking], k: usize, relevant_grade: u8) -> Result<RankingMetric> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    check_grades(rankings)?;
    let mut per_query = Vec::with_capacity(rankings.len());
    let mut skipped = 0;
    for q in rankings {
        if q.candidates.is_empty() {
            skipped += 1;
            continue;
        }
        let model = q.model_order();
        let top = k.min(model.len());
        let hits = model.iter().take(top).filter(|&&g| g >= relevant_grade).count();
        per_query.push(hits as f64 / top as f64);
    }
    Ok(summarize(per_query, skipped))
}

/// Result of the Wilcoxon signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Pairs with a non-zero difference.
    pub n: usize,
    pub z: f64,
    /// Two-sided normal approximation with tie and continuity corrections.
    pub p_value: f64,
}

/// Paired two-sided signed-rank test of `a` against `b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput("paired samples differ in length".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::InvalidInput("all paired differences are zero".into()));
    }
    let n = diffs.len();
    if n < 6 {
        return Err(Error::InvalidInput(format!("{n} non-zero differences; at least 6 are required")));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let idx = sorted_indices(&abs);
    let mut ranks = alloc::vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs[idx[j + 1]] == abs[idx[i]] {
            j += 1;
        }
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = mid;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w_minus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d < 0.0).map(|(_, r)| r).sum();
    let w = w_plus.min(w_minus);
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let (z, p) = if var <= 0.0 {
        (0.0, 1.0)
    } else {
        let z = ((w - mean).abs() - 0.5).max(0.0) / math::sqrt(var);
        (z, (2.0 * math::normal_sf(z)).min(1.0))
    };
    Ok(WilcoxonResult { w, w_plus, w_minus, n, z, p_value: p })
}

/// Query frequency class by training-set occurrence count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyBucket {
    /// More than 20 occurrences.
    Head,
    Torso,
    /// Fewer than 5 occurrences.
    Tail,
}

impl FrequencyBucket {
    pub const HEAD_ABOVE: u64 = 20;
    pub const TAIL_BELOW: u64 = 5;

    pub fn classify(count: u64) -> Self {
        if count > Self::HEAD_ABOVE {
            Self::Head
        } else if count < Self::TAIL_BELOW {
            Self::Tail
        } else {
            Self::Torso
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Head => "head",
            Self::Torso => "torso",
            Self::Tail => "tail",
        }
    }

    pub const ALL: [Self; 3] = [Self::Head, Self::Torso, Self::Tail];
}

/// A scored impression with the metadata decompositions group by.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredImpression {
    pub score: f64,
    pub label: f64,
    pub position: u8,
    pub query_key: String,
}

/// Example count and AUC of one slice; AUC is absent when a class is missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc: Option<f64>,
}

/// Per-frequency-bucket and per-position metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Buckets {
    pub frequency: BTreeMap<String, BucketMetrics>,
    pub position: BTreeMap<String, BucketMetrics>,
}

impl Buckets {
    pub fn frequency_bucket(&self, b: FrequencyBucket) -> &BucketMetrics {
        &self.frequency[b.name()]
    }
}

fn slice_metrics(items: &[&ScoredImpression]) -> BucketMetrics {
    let scores: Vec<f64> = items.iter().map(|i| i.score).collect();
    let labels: Vec<f64> = items.iter().map(|i| i.label).collect();
    BucketMetrics { n: items.len(), auc: auc(&scores, &labels).ok() }
}

/// Splits impressions by query frequency (head > 20, tail < 5, torso
/// otherwise; unseen queries count 0) and by position 1..=5.
pub fn decompose_eval(predictions: &[ScoredImpression], frequency: &BTreeMap<String, u64>) -> Buckets {
    let mut by_freq: BTreeMap<FrequencyBucket, Vec<&ScoredImpression>> = BTreeMap::new();
    let mut by_pos: BTreeMap<u8, Vec<&ScoredImpression>> = BTreeMap::new();
    for p in predictions {
        let count = frequency.get(&p.query_key).copied().unwrap_or(0);
        by_freq.entry(FrequencyBucket::classify(count)).or_default().push(p);
        by_pos.entry(p.position).or_default().push(p);
    }
    let frequency =
        FrequencyBucket::ALL.iter().map(|b| (b.name().to_string(), slice_metrics(by_freq.get(b).map_or(&[][..], |v| v.as_slice())))).collect();
    let position =
        (1..=crate::text::MAX_ADS as u8).map(|p| (p.to_string(), slice_metrics(by_pos.get(&p).map_or(&[][..], |v| v.as_slice())))).collect();
    Buckets { frequency, position }
}

/// Evaluation summary written by the `eval`, `train` and `match` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub threshold: Option<f64>,
    pub bias: Option<f64>,
    pub n: usize,
    pub buckets: Option<Buckets>,
    /// Mean NDCG keyed by cutoff.
    pub ndcg: Option<BTreeMap<String, f64>>,
    /// Mean precision keyed by cutoff.
    pub precision: Option<BTreeMap<String, f64>>,
}

impl MetricsReport {
    /// AUC, bias and accuracy at `threshold` over scored impressions.
    pub fn classification(scores: &[f64], labels: &[f64], threshold: f64) -> Self {
        Self {
            auc: auc(scores, labels).ok(),
            accuracy: (!scores.is_empty()).then(|| accuracy_at(scores, labels, threshold)),
            threshold: Some(threshold),
            bias: prediction_bias(scores, labels).ok(),
            n: scores.len(),
            buckets: None,
            ndcg: None,
            precision: None,
        }
    }

    /// NDCG and precision at every cutoff in `ks`.
    pub fn ranking(rankings: &[QueryRanking], ks: &[usize], relevant_grade: u8) -> Result<Self> {
        let mut ndcg = BTreeMap::new();
        let mut precision = BTreeMap::new();
        for &k in ks {
            ndcg.insert(k.to_string(), ndcg_at_k(rankings, k)?.mean);
            precision.insert(k.to_string(), precision_at_k(rankings, k, relevant_grade)?.mean);
        }
        Ok(Self {
            auc: None,
            accuracy: None,
            threshold: None,
            bias: None,
            n: rankings.iter().map(|r| r.candidates.len()).sum(),
            buckets: None,
            ndcg: Some(ndcg),
            precision: Some(precision),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.75);
        assert!(auc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy_at(&[0.1, 0.9], &[0.0, 1.0], 0.5), 1.0);
        let s = [0.2, 0.6, 0.7];
        let l = [0.0, 1.0, 0.0];
        assert!((accuracy_at(&s, &l, 0.5) - 2.0 / 3.0).abs() < 1e-15);
        let (t, acc) = best_threshold(&[0.1, 0.3, 0.6, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(acc, 1.0);
        assert!((t - 0.45).abs() < 1e-15);
        let (acc, used) = accuracy_at_threshold(&s, &l, None, ThresholdMode::Fixed(0.5)).unwrap();
        assert_eq!(used, 0.5);
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bias_examples() {
        let y = [0.0, 1.0, 1.0, 0.0];
        assert_eq!(prediction_bias(&y, &y).unwrap(), 1.0);
        assert_eq!(prediction_bias(&[0.3, 0.7], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(prediction_bias(&[0.6, 1.4], &[0.0, 1.0]).unwrap(), 2.0);
        assert!(prediction_bias(&[0.3], &[0.0]).is_err());
    }

    fn q(cands: &[(u8, f64)]) -> QueryRanking {
        QueryRanking { query: "q".into(), candidates: cands.to_vec() }
    }

    #[test]
    fn ndcg_examples() {
        let ideal = q(&[(5, 0.9), (3, 0.5), (0, 0.1)]);
        assert_eq!(ndcg_at_k(&[ideal], 3).unwrap().mean, 1.0);
        let rev = q(&[(3, 0.1), (0, 0.9)]);
        let dcg = 7.0 / libm::log2(3.0);
        assert!((dcg - 4.4165).abs() < 1e-4);
        let v = ndcg_at_k(&[rev], 2).unwrap().mean;
        assert!((v - dcg / 7.0).abs() < 1e-12);
        assert!((v - 0.6309).abs() < 1e-4);
        let flat = q(&[(2, 0.1), (2, 0.9), (2, 0.5)]);
        assert!((ndcg_at_k(&[flat], 2).unwrap().mean - 1.0).abs() < 1e-15);
        let zeros = q(&[(0, 0.1), (0, 0.2)]);
        let empty = q(&[]);
        let m = ndcg_at_k(&[zeros, empty], 2).unwrap();
        assert_eq!((m.mean, m.skipped, m.per_query.len()), (1.0, 1, 1));
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at_k(&[q(&[(5, 0.9), (4, 0.8)])], 2, 3).unwrap().mean, 1.0);
        assert_eq!(precision_at_k(&[q(&[(0, 0.9), (1, 0.8)])], 2, 3).unwrap().mean, 0.0);
        let r = q(&[(4, 0.9), (2, 0.8), (3, 0.7), (5, 0.1)]);
        assert!((precision_at_k(&[r], 3, 3).unwrap().mean - 2.0 / 3.0).abs() < 1e-15);
        // shorter than k: denominator is the list length
        assert_eq!(precision_at_k(&[q(&[(3, 0.9)])], 5, 3).unwrap().mean, 1.0);
    }

    #[test]
    fn wilcoxon_examples() {
        let b: Vec<f64> = (0..10).map(|i| i as f64 * 0.37).collect();
        let a: Vec<f64> = b.iter().map(|x| x + 1.5).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.w, 0.0);
        assert!(r.p_value < 0.01);

        // differences 1..=10, ranks 1 and 2 negative
        let d: Vec<f64> = (1..=10).map(|i| if i <= 2 { -(i as f64) } else { i as f64 }).collect();
        let zeros = vec![0.0; 10];
        let r = wilcoxon_signed_rank(&d, &zeros).unwrap();
        assert_eq!(r.w, 3.0);
        assert_eq!(r.w_minus, 3.0);
        assert_eq!(r.w_plus, 52.0);
        let swapped = wilcoxon_signed_rank(&zeros, &d).unwrap();
        assert_eq!(swapped.p_value, r.p_value);

        assert!(wilcoxon_signed_rank(&[1.0; 8], &[1.0; 8]).is_err());
    }

    #[test]
    fn frequency_bucket_boundaries() {
        use FrequencyBucket::*;
        let got: Vec<_> = [4, 5, 20, 21].iter().map(|&c| FrequencyBucket::classify(c)).collect();
        assert_eq!(got, [Tail, Torso, Torso, Head]);
    }

    #[test]
    fn decomposition_marks_degenerate_slices_absent() {
        let imp = |score: f64, label: f64, position: u8, q: &str| ScoredImpression { score, label, position, query_key: q.into() };
        let preds = [imp(0.9, 1.0, 1, "a"), imp(0.2, 0.0, 2, "a"), imp(0.7, 1.0, 2, "b"), imp(0.1, 1.0, 3, "b")];
        let freq: BTreeMap<String, u64> = [("a".to_string(), 1), ("b".to_string(), 1)].into_iter().collect();
        let b = decompose_eval(&preds, &freq);
        assert_eq!(b.frequency["tail"].n, 4);
        assert_eq!(b.frequency["head"].n, 0);
        assert_eq!(b.frequency["torso"].n, 0);
        assert!(b.frequency["tail"].auc.is_some());
        assert_eq!(b.position["1"].auc, None);
        assert_eq!(b.position["2"].auc, Some(1.0));
        let total: usize = b.position.values().map(|m| m.n).sum();
        assert_eq!(total, preds.len());
    }
}
