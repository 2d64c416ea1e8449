//! Stochastic-rounding toolkit for bf16 training.
//!
//! Bit-exact bf16 rounding, tensor arithmetic with per-op precision, an AdamW
//! whose weight write-back is nearest- or stochastically rounded, analytic
//! bound calculators, a multi-replica data-parallel simulator and the
//! experiment drivers built on them.

pub mod corpus;
pub mod error;
pub mod experiments;
pub mod models;
pub mod optim;
pub mod policy;
pub mod replica;
pub mod rounding;
pub mod sweep;
pub mod tensor;
pub mod theory;
pub mod verify;

pub use error::{Error, Result};
