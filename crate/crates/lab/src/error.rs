use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Core(#[from] hyperagent_core::Error),
    #[error("i/o error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl LabError {
    /// Process exit code: 2 for configuration problems, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            _ => 3,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        LabError::Io { path: path.display().to_string(), source }
    }
}

pub type LabResult<T> = std::result::Result<T, LabError>;
