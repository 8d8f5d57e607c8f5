//! File formats, checkpoints, run configuration and the command-line front
//! end for [`dsm_core`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod cohorts;
pub mod config;
pub mod embeddings;
pub mod error;
pub mod pipeline;
pub mod tables;

pub use error::{CheckpointError, Error, Result};
