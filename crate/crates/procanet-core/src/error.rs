use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-wide error type. File-format problems keep the offending path so
/// the CLI can print actionable messages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("{op}: expected {expected} channels, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: spatial dims {h}x{w} must be even")]
    OddSpatial { op: &'static str, h: usize, w: usize },

    #[error("{op}: data length {got} does not match shape ({expected} elements)")]
    DataLength {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("band {band:?} not found in raster")]
    BandNotFound { band: String },

    #[error("target value {value} is not 0 or 1")]
    NonBinaryTarget { value: f64 },

    #[error("metrics over empty counts")]
    EmptyCounts,

    #[error("non-finite value: {context}")]
    NonFinite { context: String },

    #[error("gradient for {name}: {detail}")]
    GradientMismatch { name: String, detail: String },

    #[error("{path}: bad magic: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path}: unsupported format version {found}")]
    UnsupportedVersion { path: PathBuf, found: u32 },

    #[error("{path}: raster dimensions overflow addressable memory")]
    DimensionOverflow { path: PathBuf },

    #[error("{path}: cannot parse manifest line {line:?}")]
    ManifestParse { path: PathBuf, line: String },

    #[error("{path}: payload length mismatch: expected {expected} bytes, got {got}")]
    PayloadLength {
        path: PathBuf,
        expected: u64,
        got: u64,
    },

    #[error("{path}: file truncated")]
    Truncated { path: PathBuf },

    #[error("json: {0}")]
    Json(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}
