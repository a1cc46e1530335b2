//! Desk-scale laboratory for sparse and multi-head mixture-of-experts layers.
//!
//! Everything is float64 and deterministic: the crate targets correctness
//! verification (gradient checks, exact parameter accounting, reproducible
//! training runs), not throughput.
//!
//! Module map:
//!
//! - [`tensor`] / [`graph`]: dense row-major tensors on a reverse-mode tape.
//! - [`routing`]: gate computation, top-k selection, dispatch, balance loss.
//! - [`layers`]: expert FFNs, the SMoE baseline layer, the multi-head MoE
//!   layer with its token splitting/merging permutation.
//! - [`model`]: a tiny causal decoder LM hosting the MoE layers, with Adam
//!   and the combined task + balance training objective.
//! - [`budget`]: analytic parameter/FLOP accounting and the beta solver used
//!   for parameter-matched comparisons.
//! - [`telemetry`]: expert-activation ratios, assign-diversity, CSV/PGM export.

pub mod budget;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod rng;
pub mod routing;
pub mod telemetry;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, TensorId};
pub use tensor::Tensor;
