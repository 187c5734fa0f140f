//! Tape-based reverse-mode differentiation over a fixed set of primitives.
//!
//! Every primitive is a method on [`Tape`] that computes its value eagerly
//! and appends a node holding whatever the local-gradient rule needs.
//! [`Tape::backward`] replays the nodes in reverse exactly once.

mod check;
mod tape;

pub use check::{finite_diff_gradient, relative_error, ParamSet, DEFAULT_STEP};
pub use tape::{select_top_k, GradientMap, ParamId, Tape, Var, RMS_EPS};
