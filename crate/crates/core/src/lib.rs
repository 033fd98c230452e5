//! Natural gradient descent for wide fully-connected networks.
//!
//! Exact and approximate Fisher-information preconditioners, the analytic
//! kernels that govern their dynamics in the infinite-width limit, and the
//! training loop and diagnostics used to compare the two.

extern crate blas_src;

pub mod data;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod fim;
pub mod kernels;
pub mod network;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
