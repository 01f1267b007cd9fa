use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("activation budget exceeded: peak {peak} floats > budget {budget} at step {step}")]
    Budget { peak: usize, budget: usize, step: usize },
    #[error(transparent)]
    Core(#[from] gradcache::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("output encoding: {0}")]
    Encode(String),
}

impl BenchError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 2,
            BenchError::Core(gradcache::Error::InvalidConfig(_)) => 2,
            BenchError::Budget { .. } => 3,
            _ => 1,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        BenchError::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;
