//! Routing analysis for sparse mixture-of-experts language models.
//!
//! The crate is `no_std` (with `alloc`) and contains only computation:
//!
//! * [`tensor`] and [`autodiff`]: a dense `f64` tensor and a tape-based
//!   reverse-mode engine over the handful of primitives the model needs,
//!   plus a central-difference oracle.
//! * [`model`]: a decoder-only toy language model whose feed-forward blocks
//!   are top-K routed SwiGLU experts, with greedy decoding and per
//!   (layer, expert) suppression.
//! * [`probes`]: activation-count and router-gate gradient maps.
//! * [`metrics`]: ranked coverage statistics and per-layer concentration.
//! * [`classifier`]: six-way benign/malicious expert categories.
//! * [`intervention`]: paired baseline/suppressed runs and transition counts.
//!
//! File formats and the command-line surface live in the `routelens` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod classifier;
pub mod error;
pub mod intervention;
pub mod metrics;
pub mod model;
pub mod probes;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
