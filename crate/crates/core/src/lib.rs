//! Free-boundary solver for a reversible investment problem: capacity is
//! adjusted at proportional costs against a stochastic demand, with a
//! quadratic running cost.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boundary;
pub mod cost;
pub mod diffusion;
pub mod error;
pub mod numerics;
pub mod simulate;
pub mod value;

pub use error::{Error, Result};
