use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A primitive received operands whose shapes it cannot combine.
    #[error("shape mismatch in {primitive}: {detail}")]
    Shape { primitive: &'static str, detail: String },

    /// NaN or infinity appeared where a finite value was required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid run configuration. `field` is a dotted path into the config.
    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// Malformed binary input (dataset or checkpoint).
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    /// Short category tag used by the command-line error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::Config { .. } => "config",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
            Error::Serde(_) => "serde",
        }
    }

    /// Prefixes a numeric failure with where it happened.
    pub fn with_context(self, context: impl std::fmt::Display) -> Self {
        match self {
            Error::Numeric(msg) => Error::Numeric(format!("{context}: {msg}")),
            other => other,
        }
    }
}
