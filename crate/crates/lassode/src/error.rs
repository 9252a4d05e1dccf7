use thiserror::Error;

#[derive(Debug, Error)]
pub enum LassError {
    #[error("non-finite state while integrating {context} (magnitude exceeded {limit:e} or NaN)")]
    NonFinite { context: String, limit: f64 },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("channel {channel} exceeds the maximum channel count {max}")]
    ChannelOutOfRange { channel: usize, max: usize },

    #[error("prefix of {len} points is too short (need at least 2)")]
    PrefixTooShort { len: usize },

    #[error("NaN gradient for parameter {path}; optimizer step aborted")]
    NanGradient { path: String },

    #[error("unknown parameter path {path}")]
    UnknownParam { path: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },

    #[error("{0}")]
    Data(String),
}
