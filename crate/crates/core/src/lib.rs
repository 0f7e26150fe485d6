//! Circuit-guided unlearning difficulty.
//!
//! A desk-scale toolkit: a tiny transformer with an exactly decomposable
//! residual stream, edge attribution patching (exact, EAP and EAP-IG),
//! machine-unlearning objectives, bi-level discovery of easy/hard anchor
//! samples, and the circuit-similarity difficulty score built on top.
//!
//! The crate is `no_std` and only needs `alloc`; file formats, the run
//! directory and the command line live in the companion `cud` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod anchors;
pub mod circuits;
pub mod cud;
pub mod data;
pub mod error;
pub mod kernel;
pub mod model;
pub mod rng;
pub mod stats;
pub mod unlearn;

#[cfg(test)]
mod testutil;

pub use error::{Error, ErrorClass, Result};
pub use kernel::Tensor;
pub use model::{ComputationGraph, Model, ModelConfig};
pub use rng::Rng;
