//! Dynamic parameterized operation (DPO) layers for click-through-rate models,
//! with static baselines, training, evaluation and verification suites.
//!
//! Layers are built against a [`dpn_tensor::ParamStore`] through a
//! [`builder::Builder`] and run on a [`dpn_tensor::Graph`].

pub mod baselines;
pub mod builder;
pub mod checkpoint;
pub mod data;
pub mod dpo;
pub mod embeddings;
pub mod error;
pub mod experiments;
pub mod init;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod train;
pub mod verify;

pub use dpn_tensor as tensor;
pub use error::{DpnError, Result};
