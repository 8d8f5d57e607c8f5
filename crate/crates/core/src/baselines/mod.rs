//! Comparison models: logistic regression over mean-pooled word embeddings,
//! and Okapi BM25.

pub mod bm25;
pub mod lm;

pub use bm25::{bm25_score, Bm25Stats};
pub use lm::{LmConfig, LmModel};
