use serde::Serialize;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or input; exit code 2.
    #[error("{0}")]
    Invalid(String),

    #[error("file not found: {0}")]
    NotFound(String),

    #[error("io error: {0}")]
    Io(String),

    #[error(transparent)]
    Core(#[from] mop_core::Error),
}

#[derive(Serialize)]
struct ErrorDoc<'a> {
    error: String,
    kind: &'a str,
    exit_code: i32,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) | CliError::NotFound(_) => 2,
            CliError::Io(_) => 1,
            CliError::Core(e) => match e {
                mop_core::Error::Validation(_) | mop_core::Error::Parse { .. } => 2,
                _ => 1,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Invalid(_) => "invalid",
            CliError::NotFound(_) => "not_found",
            CliError::Io(_) => "io",
            CliError::Core(mop_core::Error::Validation(_)) => "validation",
            CliError::Core(mop_core::Error::Parse { .. }) => "parse",
            CliError::Core(mop_core::Error::Transport { .. }) => "transport",
            CliError::Core(mop_core::Error::Numerical { .. }) => "numerical",
            CliError::Core(_) => "runtime",
        }
    }

    /// Machine-readable one-line error document.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&ErrorDoc {
            error: self.to_string(),
            kind: self.kind(),
            exit_code: self.exit_code(),
        })
        .expect("error serializes")
    }
}
