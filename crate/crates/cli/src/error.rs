use mirrorpose::pipeline::{Stage, StageError};
use mirrorpose::{Error, ErrorClass};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{stage} stage failed: {source}")]
    Stage { stage: &'static str, source: Error },
    #[error(transparent)]
    Core(#[from] Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl From<StageError> for CliError {
    fn from(e: StageError) -> Self {
        CliError::Stage { stage: e.stage.name(), source: e.source }
    }
}

impl CliError {
    pub fn at(stage: Stage, source: Error) -> Self {
        CliError::Stage { stage: stage.name(), source }
    }

    /// 2 config/input, 3 degenerate geometry, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Stage { source, .. } | CliError::Core(source) => match source.class() {
                ErrorClass::Input => 2,
                ErrorClass::Degenerate => 3,
                ErrorClass::Numerical => 4,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
