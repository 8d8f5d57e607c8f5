//! The matching network: shared word embedding and projection, per-side
//! bidirectional LSTM encoders, attention pooling, the query x ad match
//! tensor, and the convolutional CTR head.
//!
//! ```text
//! query ids ─┐                                ┌─ attention ─> h_q ─┐
//!            ├─ embed ─ project ─ biLSTM ─ FC ┤                    ├─ matching loss
//! ad ids ────┘   (shared weights)             └─ attention ─> h_a ─┘
//!                          v_q, v_a ─> match tensor (+ exact match) ─> conv head ─> logit
//! ```
//!
//! The pooled vectors `h_q`, `h_a` feed only the matching loss; the CTR head
//! reads the pre-pooling word vectors through the match tensor.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::math;
use crate::params::{ModelParams, ParamVars};
use crate::text::{EncodedPair, EncodedSearch};
use crate::{Error, Result};

/// Layer widths and input lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Word embedding width.
    pub d1: usize,
    /// Shared projection width.
    pub d2: usize,
    /// Query recurrent output width (both directions together).
    pub d3_q: usize,
    /// Ad recurrent output width (both directions together).
    pub d3_a: usize,
    /// Matched word width.
    pub d4: usize,
    /// Hidden width of the attention scoring networks.
    pub d_att: usize,
    pub conv_filters_stage1: usize,
    pub conv_filters_final: usize,
    /// (query extent, ad extent) of each first-stage convolution block.
    pub kernel_sizes: Vec<(usize, usize)>,
    pub l_q: usize,
    pub l_a: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl NetworkConfig {
    /// Production-scale widths.
    pub fn paper() -> Self {
        Self {
            d1: 300,
            d2: 40,
            d3_q: 30,
            d3_a: 140,
            d4: 50,
            d_att: 32,
            conv_filters_stage1: 6,
            conv_filters_final: 20,
            kernel_sizes: vec![(3, 3), (3, 4), (3, 5)],
            l_q: 10,
            l_a: 50,
        }
    }

    /// Widths sized for single-core training on the synthetic corpus.
    pub fn desk() -> Self {
        Self { d1: 24, d2: 16, d3_q: 8, d3_a: 12, d4: 8, d_att: 8, l_q: 5, l_a: 16, ..Self::paper() }
    }

    /// The gradient-check micro model: every width (filter counts included)
    /// 4, `l_q = 3`, `l_a = 5`.
    pub fn micro() -> Self {
        Self { d1: 4, d2: 4, d3_q: 4, d3_a: 4, d4: 4, d_att: 4, conv_filters_stage1: 4, conv_filters_final: 4, l_q: 3, l_a: 5, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("d1", self.d1),
            ("d2", self.d2),
            ("d3_q", self.d3_q),
            ("d3_a", self.d3_a),
            ("d4", self.d4),
            ("d_att", self.d_att),
            ("conv_filters_stage1", self.conv_filters_stage1),
            ("conv_filters_final", self.conv_filters_final),
            ("l_q", self.l_q),
            ("l_a", self.l_a),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, w)| *w == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        for (name, w) in [("d3_q", self.d3_q), ("d3_a", self.d3_a)] {
            if w % 2 != 0 {
                return Err(Error::Config(format!("{name} = {w} must be even (split across two directions)")));
            }
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::Config("kernel_sizes must be non-empty with positive extents".into()));
        }
        for (i, k) in self.kernel_sizes.iter().enumerate() {
            if self.kernel_sizes[..i].contains(k) {
                return Err(Error::Config(format!("kernel size {}x{} listed twice", k.0, k.1)));
            }
        }
        Ok(())
    }

    /// Names and shapes of every trainable tensor.
    pub fn param_shapes(&self, vocab_size: usize) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("embedding".into(), vec![vocab_size, self.d1]),
            ("shared_proj.w".into(), vec![self.d1, self.d2]),
            ("shared_proj.b".into(), vec![self.d2]),
        ];
        for (side, d3) in [("query", self.d3_q), ("ad", self.d3_a)] {
            let h = d3 / 2;
            for dir in ["fwd", "bwd"] {
                out.push((format!("{side}_rnn.{dir}.w_x"), vec![self.d2, 4 * h]));
                out.push((format!("{side}_rnn.{dir}.w_h"), vec![h, 4 * h]));
                out.push((format!("{side}_rnn.{dir}.b"), vec![4 * h]));
            }
            out.push((format!("{side}_word_proj.w"), vec![d3, self.d4]));
            out.push((format!("{side}_word_proj.b"), vec![self.d4]));
            out.push((format!("{side}_attn.w1"), vec![self.d4, self.d_att]));
            out.push((format!("{side}_attn.b1"), vec![self.d_att]));
            out.push((format!("{side}_attn.w2"), vec![self.d_att, 1]));
            out.push((format!("{side}_attn.b2"), vec![1]));
        }
        for &(kh, kw) in &self.kernel_sizes {
            out.push((format!("head.conv_{kh}x{kw}.kernel"), vec![kh, kw, self.d4 + 1, self.conv_filters_stage1]));
            out.push((format!("head.conv_{kh}x{kw}.bias"), vec![self.conv_filters_stage1]));
        }
        let merged = self.conv_filters_stage1 * self.kernel_sizes.len();
        out.push(("head.mix.kernel".into(), vec![1, 1, merged, self.conv_filters_final]));
        out.push(("head.mix.bias".into(), vec![self.conv_filters_final]));
        out.push(("head.output.w".into(), vec![self.conv_filters_final, 1]));
        out.push(("head.output.b".into(), vec![1]));
        out
    }

    /// Names of the attention scoring parameters of both sides.
    pub fn attention_param_names() -> [&'static str; 8] {
        ["ad_attn.b1", "ad_attn.b2", "ad_attn.w1", "ad_attn.w2", "query_attn.b1", "query_attn.b2", "query_attn.w1", "query_attn.w2"]
    }
}

/// Tape handles of one LSTM direction.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
}

/// Tape handles of a two-layer attention scorer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SideVars {
    pub fwd: LstmVars,
    pub bwd: LstmVars,
    pub proj_w: Var,
    pub proj_b: Var,
    pub attn: AttentionVars,
}

#[derive(Debug, Clone)]
pub struct HeadVars {
    pub convs: Vec<(Var, Var)>,
    pub mix_kernel: Var,
    pub mix_bias: Var,
    pub out_w: Var,
    pub out_b: Var,
}

/// Every DSM parameter bound on a tape.
#[derive(Debug, Clone)]
pub struct DsmVars {
    pub embedding: Var,
    pub shared_w: Var,
    pub shared_b: Var,
    pub query: SideVars,
    pub ad: SideVars,
    pub head: HeadVars,
    pub all: ParamVars,
}

impl DsmVars {
    pub fn bind<'a>(tape: &mut Tape<'a>, params: &'a ModelParams, config: &NetworkConfig) -> Result<Self> {
        let all = params.bind(tape);
        Self::from_vars(all, config)
    }

    pub fn from_vars(all: ParamVars, config: &NetworkConfig) -> Result<Self> {
        let side = |s: &str| -> Result<SideVars> {
            let lstm = |d: &str| -> Result<LstmVars> {
                Ok(LstmVars {
                    w_x: all.get(&format!("{s}_rnn.{d}.w_x"))?,
                    w_h: all.get(&format!("{s}_rnn.{d}.w_h"))?,
                    b: all.get(&format!("{s}_rnn.{d}.b"))?,
                })
            };
            Ok(SideVars {
                fwd: lstm("fwd")?,
                bwd: lstm("bwd")?,
                proj_w: all.get(&format!("{s}_word_proj.w"))?,
                proj_b: all.get(&format!("{s}_word_proj.b"))?,
                attn: AttentionVars {
                    w1: all.get(&format!("{s}_attn.w1"))?,
                    b1: all.get(&format!("{s}_attn.b1"))?,
                    w2: all.get(&format!("{s}_attn.w2"))?,
                    b2: all.get(&format!("{s}_attn.b2"))?,
                },
            })
        };
        let mut convs = Vec::new();
        for &(kh, kw) in &config.kernel_sizes {
            convs.push((all.get(&format!("head.conv_{kh}x{kw}.kernel"))?, all.get(&format!("head.conv_{kh}x{kw}.bias"))?));
        }
        Ok(Self {
            embedding: all.get("embedding")?,
            shared_w: all.get("shared_proj.w")?,
            shared_b: all.get("shared_proj.b")?,
            query: side("query")?,
            ad: side("ad")?,
            head: HeadVars {
                convs,
                mix_kernel: all.get("head.mix.kernel")?,
                mix_bias: all.get("head.mix.bias")?,
                out_w: all.get("head.output.w")?,
                out_b: all.get("head.output.b")?,
            },
            all,
        })
    }
}

/// Shared embedding lookup followed by the shared affine projection.
/// Masked positions yield zero rows.
pub fn embed_and_project(tape: &mut Tape<'_>, embedding: Var, proj_w: Var, proj_b: Var, ids: &[usize], mask: &[bool]) -> Result<Var> {
    let emb = tape.gather_rows(embedding, ids, mask)?;
    let proj = tape.affine(emb, proj_w, proj_b)?;
    tape.mask_rows(proj, mask)
}

fn lstm_pass(tape: &mut Tape<'_>, cell: LstmVars, words: Var, order: &[usize], rows: usize) -> Result<Vec<Option<Var>>> {
    let mut out = vec![None; rows];
    if order.is_empty() {
        return Ok(out);
    }
    let h = tape.value(cell.w_h).shape()[0];
    let xs = tape.affine(words, cell.w_x, cell.b)?;
    let mut state: Option<(Var, Var)> = None;
    for &t in order {
        let xrow = tape.row(xs, t)?;
        let gates = match state {
            Some((h_prev, _)) => {
                let rec = tape.matmul(h_prev, cell.w_h)?;
                tape.add(xrow, rec)?
            }
            None => xrow,
        };
        let i_raw = tape.slice(gates, 0, h)?;
        let f_raw = tape.slice(gates, h, h)?;
        let g_raw = tape.slice(gates, 2 * h, h)?;
        let o_raw = tape.slice(gates, 3 * h, h)?;
        let i = tape.sigmoid(i_raw);
        let g = tape.tanh(g_raw);
        let o = tape.sigmoid(o_raw);
        let mut c = tape.mul(i, g)?;
        if let Some((_, c_prev)) = state {
            let f = tape.sigmoid(f_raw);
            let kept = tape.mul(f, c_prev)?;
            c = tape.add(kept, c)?;
        }
        let tc = tape.tanh(c);
        let hidden = tape.mul(o, tc)?;
        out[t] = Some(hidden);
        state = Some((hidden, c));
    }
    Ok(out)
}

/// Bidirectional LSTM over the unmasked positions; each direction
/// contributes half of `out_dim` per word. Masked positions output zeros.
pub fn birnn_encode(tape: &mut Tape<'_>, fwd: LstmVars, bwd: LstmVars, words: Var, mask: &[bool]) -> Result<Var> {
    let half = tape.value(fwd.w_h).shape()[0];
    if tape.value(bwd.w_h).shape()[0] != half {
        return Err(Error::Config("both LSTM directions must have the same width".into()));
    }
    let rows = mask.len();
    let order: Vec<usize> = (0..rows).filter(|&i| mask[i]).collect();
    let rev: Vec<usize> = order.iter().rev().copied().collect();
    let f = lstm_pass(tape, fwd, words, &order, rows)?;
    let b = lstm_pass(tape, bwd, words, &rev, rows)?;
    let fm = tape.stack_rows(&f, half)?;
    let bm = tape.stack_rows(&b, half)?;
    tape.concat_last(&[fm, bm])
}

/// Softmax-weighted pooling of word vectors; returns `(weights, h)`.
pub fn attention_pool(tape: &mut Tape<'_>, attn: AttentionVars, words: Var, mask: &[bool]) -> Result<(Var, Var)> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyAttentionSupport);
    }
    let hidden = tape.affine(words, attn.w1, attn.b1)?;
    let hidden = tape.tanh(hidden);
    let scores = tape.affine(hidden, attn.w2, attn.b2)?;
    let scores = tape.reshape(scores, &[mask.len()])?;
    let weights = tape.masked_softmax(scores, mask)?;
    let pooled = tape.matmul(weights, words)?;
    Ok((weights, pooled))
}

/// Word vectors, attention weights and pooled vector of one text.
#[derive(Debug, Clone, Copy)]
pub struct SideEncoding {
    pub words: Var,
    pub weights: Var,
    pub pooled: Var,
}

/// Embedding, projection, biLSTM, per-side projection to `d4`, attention.
pub fn encode_side(tape: &mut Tape<'_>, vars: &DsmVars, side: &SideVars, ids: &[usize], mask: &[bool]) -> Result<SideEncoding> {
    let projected = embed_and_project(tape, vars.embedding, vars.shared_w, vars.shared_b, ids, mask)?;
    let encoded = birnn_encode(tape, side.fwd, side.bwd, projected, mask)?;
    let words = tape.affine(encoded, side.proj_w, side.proj_b)?;
    let words = tape.mask_rows(words, mask)?;
    let (weights, pooled) = attention_pool(tape, side.attn, words, mask)?;
    Ok(SideEncoding { words, weights, pooled })
}

/// Three same-padded conv blocks, ReLU, channel concatenation, 1x1 conv,
/// ReLU, global max-pool, and a linear output; returns the `[1]` logit.
pub fn predict_head(tape: &mut Tape<'_>, head: &HeadVars, match_tensor: Var) -> Result<Var> {
    let mut blocks = Vec::with_capacity(head.convs.len());
    for &(k, b) in &head.convs {
        let c = tape.conv2d_same(match_tensor, k, b)?;
        blocks.push(tape.relu(c));
    }
    let merged = tape.concat_last(&blocks)?;
    let mixed = tape.conv2d_same(merged, head.mix_kernel, head.mix_bias)?;
    let mixed = tape.relu(mixed);
    let pooled = tape.global_max_pool(mixed)?;
    tape.affine(pooled, head.out_w, head.out_b)
}

/// Logit of one query-ad pair from the two sides' word vectors.
pub fn score_pair(tape: &mut Tape<'_>, vars: &DsmVars, q: &SideEncoding, a: &SideEncoding, exact: &[bool]) -> Result<Var> {
    let m = tape.match_tensor(q.words, a.words, exact)?;
    predict_head(tape, &vars.head, m)
}

/// Forward result for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub y_hat: f64,
    pub logit: f64,
    pub h_q: Vec<f64>,
    pub h_a: Vec<f64>,
    pub t_q: Vec<f64>,
    pub t_a: Vec<f64>,
}

/// Evaluates every pair independently.
pub fn dsm_forward(batch: &[EncodedPair], params: &ModelParams, config: &NetworkConfig) -> Result<Vec<ForwardOutput>> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    batch
        .iter()
        .map(|pair| {
            let mut tape = Tape::new();
            let vars = DsmVars::bind(&mut tape, params, config)?;
            let q = encode_side(&mut tape, &vars, &vars.query, &pair.query_ids, &pair.query_mask)?;
            let a = encode_side(&mut tape, &vars, &vars.ad, &pair.ad_ids, &pair.ad_mask)?;
            let logit = score_pair(&mut tape, &vars, &q, &a, &pair.exact_match)?;
            let logit = tape.scalar(logit);
            Ok(ForwardOutput {
                y_hat: math::sigmoid(logit),
                logit,
                h_q: tape.value(q.pooled).data().to_vec(),
                h_a: tape.value(a.pooled).data().to_vec(),
                t_q: tape.value(q.weights).data().to_vec(),
                t_a: tape.value(a.weights).data().to_vec(),
            })
        })
        .collect()
}

/// Logits of every served pair, encoding each query once per search.
pub fn predict_logits(searches: &[EncodedSearch], params: &ModelParams, config: &NetworkConfig) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(searches.len());
    for s in searches {
        let first = s.pairs.first().ok_or_else(|| Error::InvalidInput(format!("search {} has no ads", s.search_id)))?;
        let mut tape = Tape::new();
        let vars = DsmVars::bind(&mut tape, params, config)?;
        let q = encode_side(&mut tape, &vars, &vars.query, &first.query_ids, &first.query_mask)?;
        let mut logits = Vec::with_capacity(s.pairs.len());
        for p in &s.pairs {
            let a = encode_side(&mut tape, &vars, &vars.ad, &p.ad_ids, &p.ad_mask)?;
            let l = score_pair(&mut tape, &vars, &q, &a, &p.exact_match)?;
            logits.push(tape.scalar(l));
        }
        out.push(logits);
    }
    Ok(out)
}
