//! Command-line front end for low-rank pairwise-comparison inference on
//! arena battle logs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod persist;

pub use error::{CliError, CliResult};
