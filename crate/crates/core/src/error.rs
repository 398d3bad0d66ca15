use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by tensor operations, geometry, metrics and data generation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("degenerate graph: node {0} has zero degree")]
    DegenerateGraph(usize),
    #[error("degenerate point configuration: {0}")]
    DegenerateAlignment(&'static str),
    #[error("point at or behind the camera plane (depth {0})")]
    BehindCamera(f64),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(Error::Shape { op, detail })
}
