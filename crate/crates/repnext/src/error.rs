use thiserror::Error;

/// Errors shared across the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("channel count {channels} is not divisible by {parts}")]
    NonDivisibleChannels { channels: usize, parts: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("convolution output would be degenerate: {0}")]
    DegenerateOutput(String),

    #[error("kernel of extent {kh}x{kw} cannot be centered in canvas {canvas_h}x{canvas_w}")]
    ParityMismatch {
        kh: usize,
        kw: usize,
        canvas_h: usize,
        canvas_w: usize,
    },

    #[error("identity kernel requires an odd canvas, got {0}x{1}")]
    EvenCanvas(usize, usize),

    #[error("first stage of a serial pair must have stride 1, got ({0},{1})")]
    StrideOnFirst(usize, usize),

    #[error("group layout mismatch: {0}")]
    GroupMismatch(String),

    #[error("branch specs differ: {0}")]
    SpecMismatch(String),

    #[error("spatial size must be even for the stride-2 token mixer, got {h}x{w}")]
    OddSpatial { h: usize, w: usize },

    #[error("block or model is already in fused form")]
    AlreadyFused,

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("weight schema mismatch at record `{record}`: {reason}")]
    SchemaMismatch { record: String, reason: String },

    #[error("corrupt weight file: {0}")]
    CorruptFile(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid_config(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
