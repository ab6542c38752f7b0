//! Discretization-aware differentiable architecture search.
//!
//! A cell-based super-network mixes candidate operations on every edge with
//! softmax weights over `alpha` and mixes incoming edges of every node with
//! softmax weights over `beta`. Entropy regularizers drive both mixtures
//! toward the discrete topology that will eventually be kept, which shrinks
//! the accuracy drop when the super-network is pruned.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discretize;
pub mod error;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod regularizers;
pub mod search;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
