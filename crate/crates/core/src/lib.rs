//! Learned optimisers for small image classifiers.
//!
//! The crate contains a reverse-mode differentiation engine ([`autodiff`]),
//! an MLP base learner ([`learner`]), handcrafted baselines ([`baselines`]),
//! the coordinatewise LSTM optimiser ([`neuro_opt`]), the context-aware
//! optimiser whose synapses are rebuilt from fixed orthonormal factors and
//! hypernetwork eigenvalues ([`mtl2l`]), truncated-unroll meta-training
//! ([`meta`]), dataset loaders ([`data`]) and the experiment harness
//! ([`harness`]).

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod exec;
pub mod harness;
pub mod kernels;
pub mod learner;
pub mod meta;
pub mod mtl2l;
pub mod neuro_opt;
pub mod optimizer;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
