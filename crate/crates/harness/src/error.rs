use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] koopdeepc::Error),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    /// A prerequisite check failed and `--force` was not given.
    #[error("refusing to run: {0} (use --force to override)")]
    Gated(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
