use thiserror::Error;

/// Crate-wide error type. Variants map onto CLI exit codes: configuration
/// problems exit 2, numeric failures exit 3, partial sweeps exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { msg: String, offset: u64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("sample-size error: {0}")]
    SampleSize(String),

    #[error("training failure: {0}")]
    TrainingFailure(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for CLI reporting.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format { .. } | Error::Domain(_) => 2,
            Error::Numeric(_)
            | Error::TrainingFailure(_)
            | Error::DegenerateInput(_)
            | Error::Data(_)
            | Error::SampleSize(_)
            | Error::UndefinedCorrelation(_) => 3,
            Error::Io(_) | Error::Json(_) => 1,
        }
    }
}
