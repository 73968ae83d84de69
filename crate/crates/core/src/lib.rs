//! Two-stage estimation of policy effects from grouped data.

// `!(x > t)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod first_stage;
pub mod gmm_estimator;
pub mod linalg;
pub mod md_estimator;
pub mod moments;
pub mod simlab;
mod solver;

pub use error::{Error, Result};
