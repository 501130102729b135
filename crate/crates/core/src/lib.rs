//! Gibbs measures for lattice spin systems with Heisenberg-group spins.

// `!(x > 0.0)` is used on purpose so that NaN falls into the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod catalog;
pub mod engine;
pub mod error;
pub mod estimators;
pub mod heisenberg;
pub mod lattice;
pub mod par;
pub mod quadrature;
pub mod selftest;

pub use error::{Error, Result};
