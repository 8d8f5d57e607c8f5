//! Deeply supervised query-ad matching for click-through-rate prediction.
//!
//! This crate is `no_std` (with `alloc`) and contains everything that is pure
//! computation: the reverse-mode differentiation tape, the matching network,
//! the dual CTR/matching objective with cohort negative sampling, the
//! optimizer and training loop, evaluation metrics, the synthetic corpus
//! generator, and the LM / BM25 baselines. File formats, checkpoints and the
//! command-line front end live in the `dsm` companion crate.

#![no_std]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod baselines;
pub mod convergence;
pub mod error;
pub mod fixtures;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use params::ModelParams;
pub use tensor::Tensor;
