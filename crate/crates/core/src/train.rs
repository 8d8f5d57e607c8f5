//! Parameter initialization and the DSM training loop.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::losses::{self, LossNormalizer, LossReport};
use crate::math;
use crate::metrics::{self, MetricsReport};
use crate::network::{self, DsmVars, NetworkConfig};
use crate::optim::{self, AdamState, Schedule};
use crate::params::{ModelParams, ParamGrads};
use crate::sampling::{build_cohort_pairs, CohortPairs, PairRef, SearchView, SynthesisPolicy};
use crate::tensor::Tensor;
use crate::text::{EncodedSearch, PAD_ID};
use crate::{Error, Result};

/// Training aborts once the combined loss exceeds this value.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// `P + Q`.
    #[default]
    Full,
    /// `P` alone.
    NoMatchingLoss,
    /// `P / ema(P) + Q / ema(Q)`.
    LossNormalized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    #[default]
    Learned,
    /// Word vectors loaded from a text file and kept fixed.
    Pretrained(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Searches per cohort; one cohort per step.
    pub batch_cohorts: usize,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub ablation: Ablation,
    pub init_stddev: f64,
    pub embedding_mode: EmbeddingMode,
    /// Synthesize cross-pair negatives when observed negatives run short.
    pub synthesis: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_cohorts: 21,
            epochs: 5,
            seed: 1,
            schedule: Schedule::InverseSqrt,
            ablation: Ablation::Full,
            init_stddev: 0.1,
            embedding_mode: EmbeddingMode::Learned,
            synthesis: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_cohorts == 0 {
            return Err(Error::Config("batch_cohorts must be at least 1".into()));
        }
        if !(self.init_stddev >= 0.0) {
            return Err(Error::Config("init_stddev must be non-negative".into()));
        }
        if let Schedule::StepDecay { factor, every_n_steps } = self.schedule {
            if !(factor > 0.0) || every_n_steps == 0 {
                return Err(Error::Config("step_decay needs factor > 0 and every_n_steps >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn synthesis_policy(&self) -> SynthesisPolicy {
        SynthesisPolicy { enabled: self.synthesis }
    }
}

fn zero_pad_row(params: &mut ModelParams) {
    if let Some(t) = params.get_mut("embedding") {
        let d = t.shape()[1];
        t.data_mut()[PAD_ID * d..(PAD_ID + 1) * d].fill(0.0);
    }
}

/// Truncated-normal initialization of every tensor, with the PAD row zeroed.
pub fn init_params(net: &NetworkConfig, cfg: &TrainConfig, vocab_size: usize) -> Result<ModelParams> {
    if vocab_size < 3 {
        return Err(Error::Config(format!("vocab_size {vocab_size} is below 3")));
    }
    net.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = optim::init_tensors(&net.param_shapes(vocab_size), cfg.init_stddev, &mut rng)?;
    zero_pad_row(&mut p);
    Ok(p)
}

/// Loss values of one step together with the gradient of the combined loss.
#[derive(Debug, Clone)]
pub struct CohortLoss {
    pub report: LossReport,
    pub grads: ParamGrads,
}

fn resolve(p: &PairRef, hq: &[Var], ha: &[Vec<Var>]) -> (Var, Var) {
    (hq[p.query], ha[p.ad.0][p.ad.1])
}

/// Tape nodes and values of one cohort's objective.
#[derive(Debug, Clone, Copy)]
pub struct CohortObjective {
    pub total: Var,
    pub p: f64,
    pub q: f64,
    pub n_served: usize,
}

/// Records `wp·P + wq·Q` for one cohort on `tape`, where `(wp, wq) =
/// weights(P, Q)` is computed from the forward values and held constant.
/// `P` averages over every served pair; `Q` sums over `pairs`, or is skipped
/// entirely (recorded as 0) when `with_matching` is false.
pub fn cohort_objective(
    tape: &mut Tape<'_>,
    vars: &DsmVars,
    cohort: &[&EncodedSearch],
    pairs: &CohortPairs,
    with_matching: bool,
    weights: impl FnOnce(f64, f64) -> (f64, f64),
) -> Result<CohortObjective> {
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    let mut hq = Vec::with_capacity(cohort.len());
    let mut ha = Vec::with_capacity(cohort.len());
    for s in cohort {
        let first = s.pairs.first().ok_or_else(|| Error::InvalidInput(format!("search {} has no ads", s.search_id)))?;
        let q = network::encode_side(tape, vars, &vars.query, &first.query_ids, &first.query_mask)?;
        let mut row = Vec::with_capacity(s.pairs.len());
        for p in &s.pairs {
            let a = network::encode_side(tape, vars, &vars.ad, &p.ad_ids, &p.ad_mask)?;
            logits.push(network::score_pair(tape, vars, &q, &a, &p.exact_match)?);
            labels.push(p.label);
            row.push(a.pooled);
        }
        hq.push(q.pooled);
        ha.push(row);
    }
    let all = tape.concat(&logits)?;
    let p_loss = tape.logistic_loss_logits(all, &labels)?;
    let p = tape.scalar(p_loss);
    let q_loss = if with_matching && !pairs.is_empty() {
        let pos: Vec<_> = pairs.positives.iter().map(|x| resolve(x, &hq, &ha)).collect();
        let neg: Vec<_> = pairs.negatives().map(|x| resolve(x, &hq, &ha)).collect();
        Some(losses::matching_loss_on_tape(tape, &pos, &neg)?)
    } else {
        None
    };
    let q = q_loss.map_or(0.0, |v| tape.scalar(v));
    let (wp, wq) = weights(p, q);
    let mut total = tape.scale(p_loss, wp);
    if let Some(q_loss) = q_loss {
        let scaled = tape.scale(q_loss, wq);
        total = tape.add(total, scaled)?;
    }
    Ok(CohortObjective { total, p, q, n_served: labels.len() })
}

/// [`cohort_objective`] on a fresh tape, differentiated.
pub fn cohort_loss(
    params: &ModelParams,
    net: &NetworkConfig,
    cohort: &[&EncodedSearch],
    pairs: &CohortPairs,
    with_matching: bool,
    weights: impl FnOnce(f64, f64) -> (f64, f64),
) -> Result<CohortLoss> {
    let mut tape = Tape::new();
    let vars = DsmVars::bind(&mut tape, params, net)?;
    let obj = cohort_objective(&mut tape, &vars, cohort, pairs, with_matching, weights)?;
    let l = tape.scalar(obj.total);
    let g = tape.backward(obj.total)?;
    let grads = vars.all.gradients(&g);
    Ok(CohortLoss {
        report: LossReport { p: obj.p, q: obj.q, l, n_served: obj.n_served, n_positive: pairs.positives.len(), n_negative: pairs.n_negatives() },
        grads,
    })
}

/// Cohort pairs of `cohort`, keyed by normalized query and ad text.
pub fn cohort_pairs<R: rand::Rng + ?Sized>(cohort: &[&EncodedSearch], policy: SynthesisPolicy, rng: &mut R) -> CohortPairs {
    let views: Vec<SearchView<'_>> = cohort.iter().map(|s| SearchView::of(s)).collect();
    build_cohort_pairs(&views, policy, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub p: f64,
    pub q: f64,
    pub l: f64,
    pub grad_norm_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub validation: MetricsReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn grad_norms_sq(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.grad_norm_sq).collect()
    }
}

/// Result of a completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    /// Parameters of the epoch with the best validation AUC.
    pub best: ModelParams,
    pub best_epoch: usize,
    /// Accuracy threshold chosen on validation for `best`.
    pub threshold: f64,
    pub last: ModelParams,
    pub history: TrainHistory,
}

/// A run that stopped early; the history up to the failure is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainAbort {
    pub error: Error,
    pub history: TrainHistory,
}

impl From<TrainAbort> for Error {
    fn from(a: TrainAbort) -> Self {
        a.error
    }
}

/// Click probabilities of every served pair, flattened in search order.
pub fn predict_probs(searches: &[EncodedSearch], params: &ModelParams, net: &NetworkConfig) -> Result<Vec<f64>> {
    let logits = network::predict_logits(searches, params, net)?;
    Ok(logits.into_iter().flatten().map(math::sigmoid).collect())
}

pub fn labels_of(searches: &[EncodedSearch]) -> Vec<f64> {
    searches.iter().flat_map(|s| s.pairs.iter().map(|p| p.label)).collect()
}

/// Validation report with the accuracy threshold maximized on the same split.
pub fn validation_report(searches: &[EncodedSearch], params: &ModelParams, net: &NetworkConfig) -> Result<MetricsReport> {
    let scores = predict_probs(searches, params, net)?;
    let labels = labels_of(searches);
    let threshold = if scores.is_empty() { 0.5 } else { metrics::best_threshold(&scores, &labels)?.0 };
    Ok(MetricsReport::classification(&scores, &labels, threshold))
}

/// Trains DSM on `train`, validating after every epoch. `pretrained`, when
/// given, replaces the embedding table and is kept fixed.
pub fn train(
    net: &NetworkConfig,
    cfg: &TrainConfig,
    vocab_size: usize,
    train: &[EncodedSearch],
    valid: &[EncodedSearch],
    pretrained: Option<Tensor>,
) -> core::result::Result<TrainRun, TrainAbort> {
    let mut history = TrainHistory::default();
    macro_rules! tri {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(error) => return Err(TrainAbort { error, history }),
            }
        };
    }
    tri!(cfg.validate());
    if train.is_empty() {
        tri!(Err(Error::InvalidInput("no training searches".into())));
    }
    let mut params = tri!(init_params(net, cfg, vocab_size));
    let mut frozen = BTreeSet::new();
    if let Some(table) = pretrained {
        let expected = [vocab_size, net.d1];
        if table.shape() != expected {
            tri!(Err(Error::Shape(format!("pretrained embedding has shape {:?}, expected {expected:?}", table.shape()))));
        }
        params.insert("embedding", table);
        zero_pad_row(&mut params);
        frozen.insert(String::from("embedding"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut state = AdamState::new();
    let mut normalizer = LossNormalizer::new();
    let with_matching = cfg.ablation != Ablation::NoMatchingLoss;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, f64, ModelParams)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_cohorts) {
            let cohort: Vec<&EncodedSearch> = chunk.iter().map(|&i| &train[i]).collect();
            let pairs = if with_matching { cohort_pairs(&cohort, cfg.synthesis_policy(), &mut rng) } else { CohortPairs::default() };
            let normalized = cfg.ablation == Ablation::LossNormalized;
            let out = tri!(cohort_loss(&params, net, &cohort, &pairs, with_matching, |p, q| {
                if normalized {
                    normalizer.update(p, q)
                } else {
                    (1.0, 1.0)
                }
            }));
            let step = history.steps.len() + 1;
            let l = out.report.l;
            history.steps.push(StepRecord { p: out.report.p, q: out.report.q, l, grad_norm_sq: out.grads.squared_norm() });
            if !l.is_finite() || l > DIVERGENCE_LOSS {
                tri!(Err(Error::Diverged { step, loss: l }));
            }
            tri!(optim::adam_step(&mut params, &out.grads, &mut state, cfg.learning_rate, cfg.schedule, &frozen));
            zero_pad_row(&mut params);
        }
        let report = if valid.is_empty() { MetricsReport::classification(&[], &[], 0.5) } else { tri!(validation_report(valid, &params, net)) };
        let auc = report.auc.unwrap_or(f64::NEG_INFINITY);
        let threshold = report.threshold.unwrap_or(0.5);
        history.epochs.push(EpochRecord { epoch: epoch + 1, validation: report });
        if best.as_ref().is_none_or(|b| auc > b.0) {
            best = Some((auc, epoch + 1, threshold, params.clone()));
        }
    }
    let (_, best_epoch, threshold, best_params) = best.expect("at least one epoch");
    Ok(TrainRun { best: best_params, best_epoch, threshold, last: params, history })
}
