use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("boundary oracle exhausted: requested {requested} letters, only {available} available")]
    OracleExhausted { requested: usize, available: usize },

    #[error("boundary prefix failed to stabilize: wanted {wanted} letters, confirmed {confirmed} at horizon {horizon}")]
    StabilizationFailure { wanted: usize, confirmed: usize, horizon: u64 },

    #[error("numerical instability: {0}")]
    Numerical(String),

    #[error("point within tolerance of the boundary point (Busemann singularity)")]
    Singularity,

    #[error("nearest orbit search inconclusive at depth {depth}; retry deeper")]
    InconclusiveDepth { depth: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("ping-pong violated for generator {generator}: {detail}")]
    PingPong { generator: usize, detail: String },

    #[error("path {index}: {source}")]
    Path {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("stage order: {0}")]
    StageOrder(String),

    #[error("digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
