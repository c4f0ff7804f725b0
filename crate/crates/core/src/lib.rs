//! Structured sparsity learning for small feed-forward networks.
//!
//! Training minimises cross-entropy plus ℓ2 decay, a group-lasso sparsity
//! penalty over neuron/channel groups and the inverse of the per-layer
//! variance of group norms (the attention term). An optional supervisor
//! injects mean-preserving log-normal noise into group norms to raise their
//! variance. After training, groups below a threshold are pruned and the
//! result is summarised as per-layer sparsity, a FLOP ratio and error rate.

pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gasl;
pub mod nn;
pub mod optim;
pub mod prune;
pub mod regularizers;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
