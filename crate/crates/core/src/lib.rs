//! Bayesian Gaussian process regression with hyperparameters estimated by
//! energetic variational inference: a particle approximation of their
//! marginal posterior, or a proximal-point MAP search.

pub mod basis;
pub mod benchmarks;
pub mod csvio;
pub mod data;
pub mod designs;
pub mod error;
pub mod evi;
pub mod experiment;
pub mod inference;
pub mod kernels;
pub mod posterior;

pub use data::Dataset;
pub use error::{GpError, Result};
