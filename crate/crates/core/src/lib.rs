//! Diffusion bridge simulation with residual and guided proposals.
//!
//! The crate simulates proposals for a diffusion conditioned to hit a point
//! `v` at time `T`, computes the log-likelihood ratios that correct them
//! toward the true bridge law, and ships exact and brute-force bridge oracles
//! for validation.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod auxiliary;
pub mod error;
pub mod harness;
pub mod linalg_ode;
pub mod proposals;
pub mod reference;
pub mod sde;
pub mod weights;

pub use error::{Error, Result};
