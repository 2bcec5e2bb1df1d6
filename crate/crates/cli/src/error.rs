use thiserror::Error;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_DATASET: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Backend(_) => EXIT_BACKEND,
            CliError::Dataset(_) => EXIT_DATASET,
            CliError::Failed(_) => EXIT_FAILURE,
        }
    }
}

impl From<ced_core::DatasetError> for CliError {
    fn from(e: ced_core::DatasetError) -> Self {
        CliError::Dataset(e.to_string())
    }
}

impl From<ced_core::EvalError> for CliError {
    fn from(e: ced_core::EvalError) -> Self {
        use ced_core::EvalError;
        match e {
            EvalError::Grid(m) => CliError::Config(m),
            EvalError::NoTestRecords => CliError::Dataset(e.to_string()),
            e if e.is_backend() => CliError::Backend(e.to_string()),
            e => CliError::Failed(e.to_string()),
        }
    }
}
