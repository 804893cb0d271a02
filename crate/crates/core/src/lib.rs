//! Analysis toolkit for small bias-free ReLU convolutional classifiers.
//!
//! The crate trains and loads CONV-FC networks, extracts per-neuron On-Off
//! patterns and active-path counts, and runs three experiments on top of
//! them: activation replacement, representation/path-count rank correlation,
//! and Grad-CAM variants with perturbation and tiled target-matching metrics.

pub mod cam;
pub mod correlation;
pub mod dataio;
pub mod error;
pub mod model;
pub mod ops;
pub mod pathcount;
pub mod replacement;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
