//! A desk-scale decoder-only transformer whose attention scores can be
//! captured and rewritten inside the forward pass.
//!
//! The crate is split by concern:
//!
//! - [`numerics`]: dense `f64` tensors and the handful of kernels the model needs.
//! - [`model`]: configuration, weights, byte tokenizer, KV-cached forward pass,
//!   greedy decoding and perplexity.
//! - [`interventions`]: anchor detection, attention ablations and the
//!   layer-decayed pattern amplification, composed into a forward hook.
//! - [`trainer`]: hand-written backprop, Adam/SGD, attention output dropout
//!   and finite-difference gradient checking.
//! - [`evalharness`]: synthetic multi-hop tasks, early answering vs
//!   chain-of-thought runs, the uniquely-solved filter and summaries.
//! - [`report`]: heatmap/diff emitters, anchor-frequency correlation and
//!   run manifests.

pub mod error;
pub mod evalharness;
pub mod interventions;
pub mod model;
pub mod numerics;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Tensor;
