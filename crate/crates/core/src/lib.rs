//! Normalize-and-project training for neural networks under
//! nonstationarity: a small reverse-mode autodiff engine, networks with
//! optional normalization, weight projection, optimizers, plasticity
//! metrics, baseline interventions and continual-learning benchmarks.

pub mod autodiff;
pub mod baselines;
pub mod benchmarks;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod projection;
pub mod rng;
pub mod tensor;

pub use error::{NapError, Result};
pub use tensor::Tensor;
