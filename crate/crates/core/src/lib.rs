//! Synthetic intensity-classification workbench.
//!
//! The crate is organised around the pipeline it supports:
//!
//! - [`dataset`]: deterministic circle-and-noise images, the non-monotonic
//!   intensity→class partition, pixel permutations, the `SIDS` container and
//!   PGM export.
//! - [`nn`]: a small dense-tensor engine with hand-paired forward/backward
//!   passes (conv, batch norm, ReLU, linear, softmax cross-entropy), Adam,
//!   the small/large architectures, checkpoints and a finite-difference
//!   gradient checker.
//! - [`training`]: training loop, evaluation, permutation ablation helpers and
//!   random hyperparameter search.
//! - [`profiler`]: intensity-activation profiles and kernel dominance.
//! - [`saliency`]: guided backpropagation and patch-PCA directional saliency.

pub mod dataset;
pub mod error;
pub mod nn;
pub mod profiler;
pub mod rng;
pub mod saliency;
pub mod training;

pub use error::{Error, Result};
