#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod dist;
pub mod error;
pub mod inference;
pub mod ingest;
pub mod monitor;
mod par;
pub mod priors;
pub mod simulator;
pub mod smc;

pub use error::{Error, Result};

/// Version of this crate.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
