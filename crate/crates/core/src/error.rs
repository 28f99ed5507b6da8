use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    Param(String),

    #[error("intensity {intensity} is outside the partition range [0, {limit})")]
    OutOfPartition { intensity: u32, limit: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("architecture mismatch: expected {expected}, found {found}")]
    ArchMismatch { expected: String, found: String },

    #[error("invalid layer {layer}: model has layers 1..={max}")]
    InvalidLayer { layer: usize, max: usize },

    #[error("invalid channel {channel} for layer {layer} ({channels} channels)")]
    InvalidChannel {
        layer: usize,
        channel: usize,
        channels: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("too few patches: need at least {needed}, got {got}")]
    TooFewPatches { needed: usize, got: usize },

    #[error("missing forward cache: {0}")]
    MissingCache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
