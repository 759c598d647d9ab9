//! Binary-weight network engine.
//!
//! Convolution filters are approximated as `a·B` with `B ∈ {−1,+1}` and one
//! real scale per filter. Training keeps full-precision shadow weights and
//! runs a full-precision forward pass; gradients flow through the binarized
//! weights with a straight-through estimator. At inference time binarized
//! layers run a convolution that only adds and subtracts, and models are
//! stored with one bit per binarized weight.

pub mod binarize;
pub mod config;
pub mod error;
pub mod metrics;
pub mod model_io;
pub mod nn;
pub mod run;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
