//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by tensor construction, shape algebra, and autograd.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, data has {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid axis {axis} for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called twice on the same tape without reset")]
    BackwardTwice,
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
}

/// Errors raised by on-disk formats (TSR, checkpoints, PGM/PPM).
#[derive(Debug, Error)]
pub enum StorageError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: String, expected: String },
    #[error("{path}: truncated file")]
    Truncated { path: String },
    #[error("{path}: unknown dtype code {code}")]
    UnknownDtype { path: String, code: u8 },
    #[error("{path}: crc mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CrcMismatch {
        path: String,
        stored: u32,
        computed: u32,
    },
    #[error("{path}: parameter names do not match registry; missing {missing:?}, unexpected {extra:?}")]
    NameMismatch {
        path: String,
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("{path}: malformed {format} header: {msg}")]
    MalformedHeader {
        path: String,
        format: &'static str,
        msg: String,
    },
    #[error("{path}: mask pixel value {value} is neither 0 nor 255")]
    BadMaskValue { path: String, value: u8 },
    #[error("{path}: {msg}")]
    Other { path: String, msg: String },
}

/// Errors raised by the synthetic scene generator.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SceneError {
    #[error("object leaves the canvas: {msg}")]
    OutOfBounds { msg: String },
    #[error("invalid scene spec: {msg}")]
    InvalidSpec { msg: String },
}

/// Errors raised by metric computations.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricError {
    #[error("mask dimensions differ: {left:?} vs {right:?}")]
    DimMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
}

/// Errors raised by the training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at step {step}: main={main}, aux={aux:?}")]
    NonFiniteLoss { step: u64, main: f32, aux: [f32; 4] },
    #[error("empty batch")]
    EmptyBatch,
}
