//! CTR logistic loss, cohort matching loss and their combination.

use alloc::format;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::math;
use crate::{Error, Result};

/// Predictions are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// EMA coefficient used by [`LossMode::LossNormalized`].
pub const EMA_DECAY: f64 = 0.99;

/// Mean binary cross-entropy `-(1/N) Σ [y ln ŷ + (1-y) ln(1-ŷ)]`.
pub fn logistic_loss(y_hat: &[f64], y: &[f64]) -> Result<f64> {
    if y_hat.is_empty() || y_hat.len() != y.len() {
        return Err(Error::InvalidInput(format!("logistic loss needs equal non-empty inputs ({} vs {})", y_hat.len(), y.len())));
    }
    let total: f64 = y_hat
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            t * math::ln(p) + (1.0 - t) * math::ln(1.0 - p)
        })
        .sum();
    Ok(-total / y_hat.len() as f64)
}

/// `Σ_pos -ln σ(s) + Σ_neg -ln σ(-s)` over inner-product scores.
pub fn matching_loss(positive_scores: &[f64], negative_scores: &[f64]) -> Result<f64> {
    if positive_scores.is_empty() && negative_scores.is_empty() {
        return Err(Error::InvalidInput("matching loss over zero pairs".into()));
    }
    let pos: f64 = positive_scores.iter().map(|&s| -math::log_sigmoid(s)).sum();
    let neg: f64 = negative_scores.iter().map(|&s| -math::log_sigmoid(-s)).sum();
    Ok(pos + neg)
}

/// Records the matching loss for `(h_q, h_a)` vector pairs on the tape.
pub fn matching_loss_on_tape(tape: &mut Tape<'_>, positives: &[(Var, Var)], negatives: &[(Var, Var)]) -> Result<Var> {
    if positives.is_empty() && negatives.is_empty() {
        return Err(Error::InvalidInput("matching loss over zero pairs".into()));
    }
    let mut terms = alloc::vec::Vec::with_capacity(positives.len() + negatives.len());
    for &(q, a) in positives {
        let s = tape.dot(q, a)?;
        terms.push(tape.log_sigmoid(s));
    }
    for &(q, a) in negatives {
        let s = tape.dot(q, a)?;
        let ns = tape.scale(s, -1.0);
        terms.push(tape.log_sigmoid(ns));
    }
    let stacked = tape.concat(&terms)?;
    let total = tape.sum(stacked);
    Ok(tape.scale(total, -1.0))
}

/// How the CTR and matching losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Plain,
    LossNormalized,
}

/// Running averages used to normalize the two losses; treated as constants
/// when differentiating.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossNormalizer {
    ema_p: Option<f64>,
    ema_q: Option<f64>,
}

fn ema_update(slot: &mut Option<f64>, value: f64) -> f64 {
    let next = match *slot {
        None => value,
        Some(prev) => EMA_DECAY * prev + (1.0 - EMA_DECAY) * value,
    };
    *slot = Some(next);
    next
}

impl LossNormalizer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds this step's values into the averages and returns the weights
    /// `(1/ema(P), 1/ema(Q))` to apply to the two terms. A zero average gives
    /// weight zero.
    pub fn update(&mut self, p: f64, q: f64) -> (f64, f64) {
        let ep = ema_update(&mut self.ema_p, p);
        let eq = ema_update(&mut self.ema_q, q);
        let w = |e: f64| if e > 0.0 { 1.0 / e } else { 0.0 };
        (w(ep), w(eq))
    }

    pub fn averages(&self) -> (Option<f64>, Option<f64>) {
        (self.ema_p, self.ema_q)
    }
}

/// Scalar form of the joint objective.
pub fn combined_loss(p: f64, q: f64, mode: LossMode, normalizer: &mut LossNormalizer) -> f64 {
    match mode {
        LossMode::Plain => p + q,
        LossMode::LossNormalized => {
            let (wp, wq) = normalizer.update(p, q);
            wp * p + wq * q
        }
    }
}

/// Loss values recorded for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Logistic (CTR) loss.
    pub p: f64,
    /// Matching loss.
    pub q: f64,
    /// Combined loss actually differentiated.
    pub l: f64,
    pub n_served: usize,
    pub n_positive: usize,
    pub n_negative: usize,
}
