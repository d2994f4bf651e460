use std::path::Path;

/// Errors of the std layer, grouped by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),

    #[error("{file}:{line}: `{field}`: {message}")]
    ConfigAt { file: String, line: usize, field: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("runtime failure: {0}")]
    Runtime(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::ConfigAt { .. } | Error::Config(_) => 1,
            Error::Data(_) => 2,
            Error::Runtime(_) => 3,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Error::Runtime(format!("{}: {err}", path.display()))
    }

    /// A file that should exist but cannot be read is a data problem.
    pub fn read(path: &Path, err: std::io::Error) -> Self {
        Error::Data(format!("cannot read {}: {err}", path.display()))
    }
}

impl From<milx_core::Error> for Error {
    fn from(e: milx_core::Error) -> Self {
        use milx_core::Error as E;
        match e {
            E::Config { .. } | E::UnsupportedLayer(_) => Error::Config(e.to_string()),
            E::Data(_) | E::Shape(_) => Error::Data(e.to_string()),
            E::TrainingDiverged { .. } | E::Optimization { .. } | E::MatchingFailed { .. } | E::Propagation { .. } => {
                Error::Runtime(e.to_string())
            }
        }
    }
}
