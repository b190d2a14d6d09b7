//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors raised by the recognition pipeline.
///
/// Variants are grouped by who is at fault: configuration (model or matrix
/// shapes disagree), input (values the caller passed in are unusable), data
/// (files on disk are inconsistent), and internal invariant violations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("infeasible alignment: {labels} labels need at least {needed} frames, got {frames}")]
    InfeasibleAlignment {
        labels: usize,
        needed: usize,
        frames: usize,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl std::fmt::Display, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_string(),
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) => 1,
            Error::Data(_)
            | Error::InfeasibleAlignment { .. }
            | Error::Parse { .. }
            | Error::Generation(_)
            | Error::Io { .. }
            | Error::Json(_) => 2,
            Error::Internal(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
