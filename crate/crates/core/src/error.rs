use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("invalid parameter `{name}` = {value}: {constraint}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        constraint: String,
    },

    #[error("step overflow at t = {time}: mode {mode} is not finite")]
    StepOverflow { time: f64, mode: usize },

    #[error("reflection undefined for coincident states (u = v)")]
    CoincidentStates,

    #[error("parameter domain violated: {0}")]
    ParameterDomain(String),

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("config syntax error at line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },

    #[error("config semantic error: {0}")]
    ConfigSemantic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, value: f64, constraint: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        value,
        constraint: constraint.into(),
    }
}
