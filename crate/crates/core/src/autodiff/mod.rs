//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive applied during one forward pass as an
//! append-only list of nodes; node inputs always precede the node, so the
//! insertion order is a topological order. [`Tape::backward`] replays the list
//! in reverse and returns a [`Gradients`] table. Tapes are built per forward
//! pass and dropped afterwards.

mod gradcheck;
mod tape;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
