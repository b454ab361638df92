use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("distribution has no entries")]
    EmptyDistribution,

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("protocol error: {0}")]
    ProtocolError(String),

    #[error("cannot truncate to {requested}: session holds {committed} tokens")]
    TruncateBeyondContext { requested: usize, committed: usize },

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("verifier inputs disagree in length: p={p}, d={d}, q={q}")]
    VerifierShapeError { p: usize, d: usize, q: usize },

    #[error("tokenizer does not provide byte offsets")]
    OffsetsUnavailable,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short code, used on the wire and in reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyDistribution => "EmptyDistribution",
            Error::InvalidDistribution(_) => "InvalidDistribution",
            Error::BackendUnavailable(_) => "BackendUnavailable",
            Error::ProtocolError(_) => "ProtocolError",
            Error::TruncateBeyondContext { .. } => "TruncateBeyondContext",
            Error::UnknownToken(_) => "UnknownToken",
            Error::VerifierShapeError { .. } => "VerifierShapeError",
            Error::OffsetsUnavailable => "OffsetsUnavailable",
            Error::LengthMismatch(_) => "LengthMismatch",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Precondition(_) => "Precondition",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
