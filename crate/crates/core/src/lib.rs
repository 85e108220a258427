//! Sparse identification of quadratic governing equations from short,
//! randomly initialized bursts of trajectory data.
//!
//! The pipeline is: simulate or ingest bursts ([`dynamics`]), estimate
//! velocities ([`differentiation`]), evaluate a degree-two monomial or
//! Legendre dictionary ([`dictionary`]), solve an ℓ1 basis-pursuit-denoise
//! problem per component ([`sparse_solver`]), and debias/score the result
//! ([`recovery`]). [`experiments`] wires these into seeded, CSV-producing
//! drivers.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dictionary;
pub mod differentiation;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod recovery;
pub mod rng;
pub mod sparse_solver;

pub use error::{Error, Result};
