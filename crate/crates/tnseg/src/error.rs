//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on one axis.
    #[error("{op}: axis {axis} mismatch: {left} vs {right}")]
    AxisMismatch {
        op: &'static str,
        axis: usize,
        left: usize,
        right: usize,
    },

    /// Shapes are structurally unusable for the operation.
    #[error("{op}: invalid shape {shape:?}: {msg}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },

    /// Checked-math violation (log of a non-positive value, division by zero).
    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("{op}: reduction over an empty axis set")]
    EmptyReduction { op: &'static str },

    #[error("backward: loss must be scalar, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("gradient for parameter `{param}` contains NaN")]
    NanGradient { param: String },

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("labels contain a single class; metric undefined")]
    SingleClass,

    #[error("{0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {msg}")]
    FileFormat { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
