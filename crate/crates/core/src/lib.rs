//! Minimum-time optimal control toolkit for linear systems and planar
//! control-affine systems with box controls `[-1, 1]^m`.
//!
//! The crate computes bang-bang extremals from terminal covectors, samples
//! reachable-set boundaries, evaluates minimum-time values and produces
//! sample-based strict-convexity and positive-reach certificates.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bangbang;
pub mod error;
pub mod fixtures;
pub mod geometry;
pub mod linalg;
pub mod mintime;
pub mod nonlinear2d;
pub mod switching;
pub mod sysdef;

pub use error::{Error, Result};
