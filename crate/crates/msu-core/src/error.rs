//! Error type shared by all core modules.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by tensor, blocking, projection, training and GEMM operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor rank not supported by the operation (e.g. GEMM lowering wants 2 or 4).
    UnsupportedRank(usize),
    /// Shape/extent mismatch between two operands.
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    /// Data length does not match the product of the shape extents.
    LengthMismatch { expected: usize, actual: usize },
    /// A non-finite value (NaN/Inf) appeared where only finite values are allowed.
    NonFinite(&'static str),
    /// Invalid block shape (empty, zero extent, all-ones, or more than 3 dims).
    InvalidBlockShape(String),
    /// Block shape incompatible with the layer rank (e.g. 3-dim blocks on a matrix).
    IncompatibleBlocking(String),
    /// Block index out of range.
    BlockIndexOutOfRange { index: usize, num_blocks: usize },
    /// Operation on an empty block.
    EmptyBlock,
    /// Constraint specification rejected before use (bad ratio, nm_keep, missing layer...).
    InvalidSpec(String),
    /// Model construction or forward/backward shape error, tagged with the layer index.
    Layer { index: usize, message: String },
    /// Backward called with a cache that does not match the model/batch.
    StaleCache(String),
    /// Training diverged (non-finite loss or gradients).
    Diverged(String),
    /// Compiled matrix and report disagree with the weights they describe.
    ReportMismatch(String),
    /// Empty dataset where at least one sample is required.
    EmptyDataset,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::UnsupportedRank(r) => write!(f, "unsupported rank {r}"),
            Error::ShapeMismatch { expected, actual } => {
                write!(f, "shape mismatch: expected {expected:?}, got {actual:?}")
            }
            Error::LengthMismatch { expected, actual } => {
                write!(f, "length mismatch: expected {expected}, got {actual}")
            }
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::InvalidBlockShape(msg) => write!(f, "invalid block shape: {msg}"),
            Error::IncompatibleBlocking(msg) => write!(f, "incompatible blocking: {msg}"),
            Error::BlockIndexOutOfRange { index, num_blocks } => {
                write!(f, "block index {index} out of range (partition has {num_blocks} blocks)")
            }
            Error::EmptyBlock => write!(f, "empty block"),
            Error::InvalidSpec(msg) => write!(f, "invalid constraint spec: {msg}"),
            Error::Layer { index, message } => write!(f, "layer {index}: {message}"),
            Error::StaleCache(msg) => write!(f, "stale forward cache: {msg}"),
            Error::Diverged(msg) => write!(f, "training diverged: {msg}"),
            Error::ReportMismatch(msg) => write!(f, "report/weights mismatch: {msg}"),
            Error::EmptyDataset => write!(f, "empty dataset"),
        }
    }
}

#[cfg(test)]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
