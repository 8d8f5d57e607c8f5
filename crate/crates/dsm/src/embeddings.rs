//! Pretrained word vectors: `token v1 v2 ... vdim` per line.

use std::path::Path;

use dsm_core::optim::truncated_normal;
use dsm_core::text::{Vocab, PAD_ID};
use dsm_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cohorts::read_lines;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedTable {
    /// `[vocab size, dim]`.
    pub table: Tensor,
    /// Fraction of real vocabulary tokens (PAD, OOV and SEP excluded) found in the file.
    pub coverage: f64,
}

/// Builds an embedding table from text lines. Rows for tokens missing from
/// the file are drawn from the truncated normal; the PAD row is zero.
pub fn pretrained_from_lines<S: AsRef<str>>(lines: &[S], vocab: &Vocab, dim: usize, init_stddev: f64, seed: u64) -> Result<PretrainedTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = vocab.len();
    let mut data: Vec<f64> = (0..n * dim).map(|_| truncated_normal(&mut rng, init_stddev)).collect();
    let mut covered = vec![false; n];
    for (i, line) in lines.iter().enumerate() {
        let mut fields = line.as_ref().split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("embedding line {}: {e}", i + 1)))?;
        if values.len() != dim {
            return Err(Error::Data(format!("embedding line {}: {} values, expected {dim}", i + 1, values.len())));
        }
        let id = vocab.id(token);
        if id < 2 || id == vocab.sep_id() || vocab.token(id) != Some(token) || covered[id] {
            continue;
        }
        data[id * dim..(id + 1) * dim].copy_from_slice(&values);
        covered[id] = true;
    }
    data[PAD_ID * dim..(PAD_ID + 1) * dim].fill(0.0);
    let real = n.saturating_sub(3);
    let coverage = if real == 0 { 0.0 } else { covered.iter().filter(|&&c| c).count() as f64 / real as f64 };
    Ok(PretrainedTable { table: Tensor::new(vec![n, dim], data)?, coverage })
}

pub fn load_pretrained_embeddings(path: &Path, vocab: &Vocab, dim: usize, init_stddev: f64, seed: u64) -> Result<PretrainedTable> {
    pretrained_from_lines(&read_lines(path)?, vocab, dim, init_stddev, seed)
}
