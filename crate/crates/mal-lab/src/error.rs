use mal_core::MalError;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("dependency error: {0}")]
    Dependency(String),
    #[error("staleness error: {0}")]
    Stale(String),
    #[error("corruption error: {0}")]
    Corrupt(String),
    #[error("io error: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] MalError),
}

impl LabError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code: 0 success, 2 config, 3 dependency/staleness,
    /// 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Dependency(_) | LabError::Stale(_) => 3,
            LabError::Core(MalError::Numeric(_)) => 4,
            _ => 2,
        }
    }
}
