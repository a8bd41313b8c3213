//! Temporally evolving aggregation (TEA) for sequential recommendation.
//!
//! A next-item model scored as a CRF: a unary term aggregates the user's
//! temporally evolving social/bipartite neighborhood, a transition term
//! aggregates the user's own behavior sequence, and training maximizes a
//! negative-sampled pseudo-likelihood.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod exec;
pub mod model;
pub mod objective;
pub mod params;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod testutil;

pub use autodiff::{Tape, Var};
pub use exec::Execution;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
