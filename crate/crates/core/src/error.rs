use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed or inconsistent user input (files, config, arguments).
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("schema: {0}")]
    Schema(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A command was run before the command producing its inputs.
    #[error("{0}")]
    MissingStage(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Process exit code: 1 for problems with the user's input, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::Shape(_) => 2,
            _ => 1,
        }
    }
}
