use csc_core::eval::{EvalError, ReportError};
use csc_core::transcript::TranscriptError;
use csc_core::DomainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("calibration missing: {0}")]
    MissingCalibration(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::BadConfig(_) | CliError::BadInput(_) => 2,
            CliError::Io(_) => 3,
            CliError::MissingCalibration(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<DomainError> for CliError {
    fn from(e: DomainError) -> Self {
        match e {
            DomainError::InvalidConfig { .. } => CliError::BadConfig(e.to_string()),
            other => CliError::BadInput(other.to_string()),
        }
    }
}

impl From<TranscriptError> for CliError {
    fn from(e: TranscriptError) -> Self {
        match e {
            TranscriptError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::BadInput(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::MissingRoundCalibration { .. } => CliError::MissingCalibration(e.to_string()),
            EvalError::InvalidRatio(_) => CliError::BadConfig(e.to_string()),
            other => CliError::BadInput(other.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Io(e.to_string())
    }
}
