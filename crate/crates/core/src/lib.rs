//! Knowledge-editing laboratory built around a small decoder-only transformer.
//!
//! The crate trains a toy model to memorize a synthetic fact world, edits it
//! one MLP layer at a time with closed-form editors (ROME, R-ROME, EMMET),
//! and ranks layers with Layer Gradient Analysis (per-layer gradient inner
//! products between old- and new-knowledge sequences) or causal mediation
//! analysis. The `eval` module provides the metric suite, exhaustive layer
//! sweeps, Welch's t-test and the proxy/test generalization protocol.
//!
//! Data-parallel loops (per-sequence gradients, the layer × sample edit grid,
//! per-query attribution) go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Reductions are
//! always performed in a fixed order so results do not depend on the number
//! of worker threads.

pub mod attribution;
pub mod corpus;
pub mod editors;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod par;

pub use error::{Error, Result};
