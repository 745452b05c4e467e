use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("gantries {first} and {second} share milepost {milepost}")]
    DuplicateMilepost {
        first: String,
        second: String,
        milepost: f64,
    },

    #[error("gantry {gantry} has no downstream sensor within {radius_mi} mi")]
    NoCriticalSensor { gantry: String, radius_mi: f64 },

    #[error("{0} mph is not on the speed limit grid")]
    OffGrid(u32),

    #[error("action mask is empty")]
    EmptyMask,

    #[error("expected {expected} speed limits, got {got}")]
    LimitCount { expected: usize, got: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite training diagnostics: {0}")]
    NonFinite(String),

    #[error("line {line}: {message}")]
    Schema { line: u64, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
