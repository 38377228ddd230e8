use std::path::Path;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_FINGERPRINT: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] tangent_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("oracle check failed: {failed}")]
    Oracle { report: String, failed: String },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use tangent_core::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) | CliError::Io { .. } => EXIT_DATA,
            CliError::Oracle { .. } => EXIT_NUMERICAL,
            CliError::Core(e) => match e {
                E::Config(_) | E::Parameter(_) | E::Composition(_) | E::State(_) => EXIT_CONFIG,
                E::Data(_) | E::Io(_) | E::Json(_) | E::Tensor(_) => EXIT_DATA,
                E::Fingerprint { .. } => EXIT_FINGERPRINT,
                E::NonFinite { .. } => EXIT_NUMERICAL,
            },
        }
    }
}

impl From<tangent_core::TensorError> for CliError {
    fn from(e: tangent_core::TensorError) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
