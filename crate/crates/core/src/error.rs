use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical error in round {round}, client {client}: {detail}")]
    Numerical {
        round: usize,
        client: usize,
        detail: String,
    },

    #[error("format error in `{field}`: {detail}")]
    Format { field: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("round {round}: {source}")]
    InRound {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches a round number, keeping an existing annotation intact.
    pub(crate) fn in_round(self, round: usize) -> Self {
        match self {
            e @ (Error::InRound { .. } | Error::Numerical { .. }) => e,
            e => Error::InRound {
                round,
                source: Box::new(e),
            },
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Io { .. } => 4,
            Error::InRound { source, .. } => match source.as_ref() {
                Error::Io { .. } => 4,
                _ => 3,
            },
            Error::Numerical { .. } | Error::Format { .. } => 3,
        }
    }
}
