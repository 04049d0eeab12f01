//! Mask search over frozen pre-trained weights.
//!
//! A trained network is pruned by learning which weights to keep, never by
//! changing the weights themselves. Relaxed per-weight scores in `[0,1]` are
//! thresholded layer by layer into a hard mask, trained with a
//! straight-through gradient, and warm-started from a classical pruning
//! criterion (magnitude, SNIP, GraSP or random).
//!
//! The crate carries its own small define-by-run autograd ([`autograd`]) and
//! CNN layers ([`nn`]), so every gradient on the search path is explicit.

pub mod autograd;
pub mod checkpoint;
pub mod criteria;
pub mod data;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod kernels;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod search;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
