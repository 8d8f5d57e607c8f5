//! Logistic regression over the concatenated mean word embeddings of the
//! query and the ad.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::math;
use crate::optim::{self, AdamState, Schedule};
use crate::params::ModelParams;
use crate::tensor::Tensor;
use crate::text::{EncodedPair, PAD_ID};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub init_stddev: f64,
    pub schedule: Schedule,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { embed_dim: 24, learning_rate: 0.01, batch_size: 64, epochs: 5, seed: 1, init_stddev: 0.1, schedule: Schedule::Constant }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("embed_dim, batch_size and epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters: `embedding` `[V, d]`, `w` `[2d, 1]`, `b` `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmModel {
    pub params: ModelParams,
    /// Pretrained embeddings stay fixed during training.
    pub frozen_embedding: bool,
}

fn pool_weights(mask: &[bool]) -> Vec<f64> {
    let n = mask.iter().filter(|&&m| m).count();
    let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    mask.iter().map(|&m| if m { w } else { 0.0 }).collect()
}

impl LmModel {
    pub fn new(vocab_size: usize, cfg: &LmConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.embed_dim;
        let shapes = vec![(String::from("embedding"), vec![vocab_size, d]), (String::from("w"), vec![2 * d, 1])];
        let mut params = optim::init_tensors(&shapes, cfg.init_stddev, &mut rng)?;
        params.insert("b", Tensor::zeros(&[1]));
        zero_pad_row(&mut params);
        Ok(Self { params, frozen_embedding: false })
    }

    /// Uses `table` as a fixed embedding.
    pub fn with_embedding(table: Tensor, cfg: &LmConfig) -> Result<Self> {
        let [v, d] = *table.shape() else {
            return Err(Error::Shape("embedding table must be 2-D".into()));
        };
        let mut m = Self::new(v, &LmConfig { embed_dim: d, ..cfg.clone() })?;
        m.params.insert("embedding", table);
        m.frozen_embedding = true;
        Ok(m)
    }

    pub fn embed_dim(&self) -> usize {
        self.params.get("embedding").map_or(0, |t| t.shape()[1])
    }

    fn logit_on_tape(&self, tape: &mut Tape<'_>, emb: Var, w: Var, b: Var, pair: &EncodedPair) -> Result<Var> {
        let q = tape.gather_rows(emb, &pair.query_ids, &pair.query_mask)?;
        let qw = tape.constant(Tensor::vector(pool_weights(&pair.query_mask)));
        let q = tape.matmul(qw, q)?;
        let a = tape.gather_rows(emb, &pair.ad_ids, &pair.ad_mask)?;
        let aw = tape.constant(Tensor::vector(pool_weights(&pair.ad_mask)));
        let a = tape.matmul(aw, a)?;
        let x = tape.concat(&[q, a])?;
        tape.affine(x, w, b)
    }

    /// Pre-sigmoid score of one pair.
    pub fn logit(&self, pair: &EncodedPair) -> Result<f64> {
        let emb = self.params.require("embedding")?;
        let d = emb.shape()[1];
        let mut feats = vec![0.0; 2 * d];
        for (side, (ids, mask)) in [(&pair.query_ids, &pair.query_mask), (&pair.ad_ids, &pair.ad_mask)].into_iter().enumerate() {
            let pw = pool_weights(mask);
            for (&id, &wgt) in ids.iter().zip(&pw) {
                if wgt == 0.0 {
                    continue;
                }
                let row = emb.data().get(id * d..(id + 1) * d).ok_or(Error::IdOutOfRange { id, size: emb.shape()[0] })?;
                for (f, &e) in feats[side * d..(side + 1) * d].iter_mut().zip(row) {
                    *f += wgt * e;
                }
            }
        }
        let w = self.params.require("w")?.data();
        let b = self.params.require("b")?.data()[0];
        Ok(feats.iter().zip(w).map(|(x, y)| x * y).sum::<f64>() + b)
    }

    pub fn predict(&self, pair: &EncodedPair) -> Result<f64> {
        Ok(math::sigmoid(self.logit(pair)?))
    }

    /// Mean logistic loss of one mini-batch and one Adam step on it.
    pub fn step(&mut self, batch: &[&EncodedPair], state: &mut AdamState, cfg: &LmConfig) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let (loss, grads) = {
            let mut tape = Tape::new();
            let vars = self.params.bind(&mut tape);
            let (emb, w, b) = (vars.get("embedding")?, vars.get("w")?, vars.get("b")?);
            let mut logits = Vec::with_capacity(batch.len());
            for p in batch {
                logits.push(self.logit_on_tape(&mut tape, emb, w, b, p)?);
            }
            let logits = tape.concat(&logits)?;
            let labels: Vec<f64> = batch.iter().map(|p| p.label).collect();
            let loss = tape.logistic_loss_logits(logits, &labels)?;
            let g = tape.backward(loss)?;
            (tape.scalar(loss), vars.gradients(&g))
        };
        let mut frozen = BTreeSet::new();
        if self.frozen_embedding {
            frozen.insert(String::from("embedding"));
        }
        optim::adam_step(&mut self.params, &grads, state, cfg.learning_rate, cfg.schedule, &frozen)?;
        zero_pad_row(&mut self.params);
        Ok(loss)
    }

    /// Trains on `pairs` for `cfg.epochs` shuffled passes; returns the mean
    /// loss of every epoch.
    pub fn train(&mut self, pairs: &[EncodedPair], cfg: &LmConfig) -> Result<Vec<f64>> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::InvalidInput("no training pairs".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut state = AdamState::new();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut steps = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&EncodedPair> = chunk.iter().map(|&i| &pairs[i]).collect();
                let loss = self.step(&batch, &mut state, cfg)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite("LM training loss".into()));
                }
                total += loss;
                steps += 1;
            }
            history.push(total / steps as f64);
        }
        Ok(history)
    }
}

fn zero_pad_row(params: &mut ModelParams) {
    if let Some(t) = params.get_mut("embedding") {
        let d = t.shape()[1];
        t.data_mut()[PAD_ID * d..(PAD_ID + 1) * d].fill(0.0);
    }
}
