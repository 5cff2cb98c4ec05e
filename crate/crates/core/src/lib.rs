//! DAPNet: a mixture-of-experts classifier for multivariate time series.
//!
//! Three heterogeneous experts (periodicity, cross-variable correlation and
//! hybrid convolution/attention) are fused per sample by a sparse top-K gate
//! and trained with a focal + load-balancing objective. Everything runs on
//! the small autodiff engine in [`tensor`].

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experts;
pub mod loss;
pub mod model;
pub mod moe;
pub mod nn;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
