//! Finite-difference simulation of the one-dimensional stochastic
//! Landau–Lifshitz–Bloch equation, with central-limit and large-deviation
//! experiments.

// `!(x > 0.0)` is used on purpose: it rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod clt;
pub mod dynamics;
pub mod error;
pub mod field;
pub mod ldp;
pub mod noise;

pub use error::{LlbError, Result};
