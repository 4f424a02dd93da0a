use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("non-finite value produced at sigma point {index}")]
    NonFinite { index: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("data error: {}", .0.join("; "))]
    Data(Vec<String>),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(vec![msg.into()])
    }

    /// Short machine-readable category, used in CLI error documents.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Numerical(_) | Error::NonFinite { .. } => "numerical",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Data(_) | Error::Io(_) | Error::Serde(_) => "data",
        }
    }

    /// Individual messages; lists every violation for config and data errors.
    pub fn details(&self) -> Vec<String> {
        match self {
            Error::Config(v) | Error::Data(v) => v.clone(),
            other => vec![other.to_string()],
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
