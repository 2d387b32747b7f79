//! Communication-efficient federated learning toolkit.
//!
//! The crate bundles a gradient-compression codec (top-k sparsification with
//! local residual accumulation followed by 4-bit hierarchical quantization), a
//! set of baseline pipelines for comparison, static and exponentially decaying
//! client sampling, weighted sparse aggregation, and a deterministic
//! round-based simulator that records per-round accuracy and upload cost.
//!
//! Every stochastic step takes an explicit seed, so a simulation is a pure
//! function of its [`sim::SimConfig`].

pub mod aggregate;
pub mod baseline;
pub mod codec;
pub mod data;
mod error;
pub mod model;
pub mod sampler;
pub mod seed;
pub mod sim;
pub mod sparsify;

pub use error::{ConfigError, DecodeError, Error, IdxError, Result};
pub use model::{Batch, ModelKind, ModelSpec, ParamVector};
pub use sparsify::SparseSelection;
