use thiserror::Error;

/// Command-level failures, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{stage}: {source}")]
    Numerical {
        stage: &'static str,
        #[source]
        source: btlinfer::Error,
    },
}

impl CliError {
    /// 2 for malformed input or configuration, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical { .. } => 3,
            _ => 2,
        }
    }

    pub fn numerical(stage: &'static str) -> impl FnOnce(btlinfer::Error) -> CliError {
        move |source| CliError::Numerical { stage, source }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Parse(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
