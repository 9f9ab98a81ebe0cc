//! CLI error type with a fixed exit-code contract:
//! 0 success, 1 usage or config errors, 2 runtime failures.

use std::fmt;

#[derive(Debug)]
pub enum AppError {
    /// Bad flags, malformed config, unknown names: exit code 1.
    Usage(String),
    /// Failures while doing the work (I/O, training, search): exit code 2.
    Runtime(String),
}

impl AppError {
    pub fn usage(msg: impl Into<String>) -> AppError {
        AppError::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> AppError {
        AppError::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Usage(msg) => write!(f, "usage error: {}", msg),
            AppError::Runtime(msg) => write!(f, "error: {}", msg),
        }
    }
}

impl std::error::Error for AppError {}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> AppError {
        AppError::Runtime(e.to_string())
    }
}

impl From<ftlab_core::training::TrainError> for AppError {
    fn from(e: ftlab_core::training::TrainError) -> AppError {
        AppError::Runtime(e.to_string())
    }
}

impl From<ftlab_core::hpo::HpoError> for AppError {
    fn from(e: ftlab_core::hpo::HpoError) -> AppError {
        AppError::Runtime(e.to_string())
    }
}

impl From<ftlab_core::data::DataError> for AppError {
    fn from(e: ftlab_core::data::DataError) -> AppError {
        AppError::Runtime(e.to_string())
    }
}

impl From<ftlab_core::model::ModelError> for AppError {
    fn from(e: ftlab_core::model::ModelError) -> AppError {
        AppError::Runtime(e.to_string())
    }
}
