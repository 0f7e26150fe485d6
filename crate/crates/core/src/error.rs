use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use crate::model::Model;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Broad failure class, used by front-ends to map errors onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Degenerate,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value during {0}")]
    NonFinite(&'static str),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corpus generation failed: {0}")]
    Generation(String),
    #[error("cannot build patch pair: {0}")]
    Pairing(String),
    #[error("similarity undefined: both circuits are empty")]
    UndefinedSimilarity,
    #[error("degenerate selection: {0}")]
    DegenerateSelection(String),
    #[error("anchor stabilization failed: {0}")]
    Stabilization(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        /// Parameters from the last epoch that finished with finite loss.
        last_stable: Option<Box<Model>>,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Input(_) | Error::Generation(_) | Error::Pairing(_) | Error::Dimension { .. } => {
                ErrorClass::Data
            }
            Error::NonFinite(_) | Error::Diverged { .. } => ErrorClass::Numeric,
            Error::UndefinedSimilarity
            | Error::DegenerateSelection(_)
            | Error::Stabilization(_) => ErrorClass::Degenerate,
        }
    }
}
