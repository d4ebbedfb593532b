//! Low-rank Bradley-Terry-Luce score matrices: fitting, debiased one-step
//! inference and Monte Carlo calibration.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
pub mod fitting;
pub mod geometry;
pub mod inference;
pub mod model;
pub mod simlab;

pub use error::{Error, Result};
