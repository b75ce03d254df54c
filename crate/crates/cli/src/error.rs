use std::path::Path;

/// Failure of a command, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid configuration or malformed input file; exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Anything that went wrong while running; exit code 1.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    /// A JSON parse failure of `path`, with line and column.
    pub fn parse(path: &Path, err: &serde_json::Error) -> Self {
        CliError::Config(format!(
            "{}: line {}, column {}: {err}",
            path.display(),
            err.line(),
            err.column()
        ))
    }
}

impl From<bmtas::Error> for CliError {
    fn from(e: bmtas::Error) -> Self {
        match e {
            bmtas::Error::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
