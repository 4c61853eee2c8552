//! Statistical detection and correction of adversarial examples.
//!
//! The core test perturbs an input with calibrated noise and watches how the
//! pairwise log-odds respond; adversarial inputs sit in unstable pockets
//! whose responses are far outside the distribution fitted on natural data.
//! Around that test this crate carries everything needed to evaluate it at
//! desk scale: a small reverse-mode autodiff graph, trainable classifiers
//! with an exactly linear last layer, a gradient attack suite (PGD in two
//! norms, Carlini-Wagner, defense-aware EOT, DeepFool), feature-space
//! geometry diagnostics, and a deterministic end-to-end pipeline.
//!
//! Work is data-parallel by default via the `parallel` feature; disabling it
//! yields a sequential build that produces bit-identical results.

pub mod artifacts;
pub mod attack;
pub mod bundle;
pub mod data;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod graph;
pub mod meta;
pub mod model;
pub mod noise;
pub mod odds;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
