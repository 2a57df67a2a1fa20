//! Lifting 2D keypoint sequences to 3D poses with a dual-stream
//! attention / graph-convolution network.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors and a reverse-mode tape over a closed primitive set.
//! * [`graph`]: skeleton and temporal nearest-neighbour adjacency.
//! * [`model`]: configuration, parameters, layers and the full forward pass.
//! * [`metrics`]: training losses and evaluation protocols.
//! * [`data`]: sequence files, a synthetic motion generator, batching.
//! * [`train`]: AdamW, learning-rate schedule, training and evaluation runs.
//! * [`accounting`]: exact parameter and multiply-accumulate counts.
//! * [`gradcheck`]: the finite-difference suite run by the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
