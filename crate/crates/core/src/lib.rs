//! Retraining-free structured pruning for transformer encoders.
//!
//! Heads and FFN neurons are scored by how much predictive and
//! representational knowledge they carry, a threshold search picks the units
//! to drop under a FLOPs budget, and sub-layers are pruned bottom-up with
//! their output projections refit by least squares.

pub mod data;
pub mod error;
pub mod eval;
pub mod knowledge;
pub mod kpms;
pub mod kpp;
pub mod model;
pub mod runtime;
pub mod synth;
pub mod tensor;

pub use error::{ContainerError, Error, Result};
