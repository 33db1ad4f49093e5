use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("solver step {step_ns} ns exceeds stability limit {limit_ns} ns")]
    UnstableStep { step_ns: f64, limit_ns: f64 },

    #[error("calibration has no spin contrast")]
    NoContrast,

    #[error("score function has no sign change on [{lo}, {hi}]")]
    NoRoot { lo: f64, hi: f64 },

    #[error("invalid fit parameter: {0}")]
    InvalidParameter(String),

    #[error("singular jacobian: {0}")]
    SingularJacobian(String),

    #[error("schema violation at line {line}, field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },

    #[error("malformed time-tag record at byte offset {offset}: {message}")]
    MalformedRecord { offset: u64, message: String },

    #[error("time-tag stream contains no sync markers")]
    NoSync,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable identifier, used as a machine-parsable error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidModel(_) => "invalid-model",
            Error::InvalidInput(_) => "invalid-input",
            Error::DegenerateModel(_) => "degenerate-model",
            Error::UnstableStep { .. } => "unstable-step",
            Error::NoContrast => "no-contrast",
            Error::NoRoot { .. } => "no-root",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::SingularJacobian(_) => "singular-jacobian",
            Error::Schema { .. } => "schema",
            Error::MalformedRecord { .. } => "malformed-record",
            Error::NoSync => "no-sync",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
