//! File formats, run directories and the command-line front end of the CUD
//! pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod pipeline;

pub use error::{AppError, AppResult};
