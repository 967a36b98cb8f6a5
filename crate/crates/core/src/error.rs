use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("convolution produces an empty output: {0}")]
    EmptyOutput(String),
    #[error("channel count {channels} is not divisible by {factor}")]
    ChannelNotDivisible { channels: usize, factor: usize },
    #[error("spatial dims {h}x{w} are not divisible by {factor}")]
    SpatialNotDivisible { h: usize, w: usize, factor: usize },
    #[error("bad channel split: {0}")]
    BadSplit(String),
    #[error("bad padding: {0}")]
    BadPad(String),
    #[error("non-finite value in tensor data")]
    NonFinite,
    #[error("wavelet transform needs even spatial dims, got {h}x{w}")]
    OddSpatialDim { h: usize, w: usize },
    #[error("directional transforms need 3x3 kernels, got {kh}x{kw}")]
    NotThreeByThree { kh: usize, kw: usize },
    #[error("channel split needs an even channel count, got {0}")]
    OddChannels(usize),
    #[error("loss must be a single scalar, got shape {0}")]
    NotScalarLoss(String),
    #[error("unsupported operation: {0}")]
    UnsupportedOp(String),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("expected a 3-channel RGB tensor, got {0} channels")]
    NotRgb(usize),
    #[error("image too small for SSIM window: {h}x{w} (need at least 11x11)")]
    MinSizeViolation { h: usize, w: usize },
    #[error("dataset contains no pairs: {0}")]
    EmptyDataset(String),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("checkpoint does not match its config: {0}")]
    ConfigMismatch(String),
    #[error("unsupported PNG: {0}")]
    UnsupportedPng(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
