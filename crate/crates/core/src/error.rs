use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Each variant maps onto one of the CLI exit codes through [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("structural mismatch at `{path}`: {detail}")]
    Structure { path: String, detail: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: malformed file: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }

    /// 2 = configuration, 3 = data, 4 = numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Structure { .. } | Error::Dimension(_) => 2,
            Error::Input(_) | Error::Io { .. } | Error::Format { .. } => 3,
            Error::Numerical(_) | Error::Evaluation(_) => 4,
        }
    }
}
