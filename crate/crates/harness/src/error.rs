use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(clustr_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
}

impl From<clustr_core::Error> for HarnessError {
    fn from(e: clustr_core::Error) -> Self {
        use clustr_core::Error as E;
        match e {
            e if e.is_numeric() => HarnessError::Numeric(e.to_string()),
            E::Param(m) | E::Geometry(m) => HarnessError::Config(m),
            other => HarnessError::Core(other),
        }
    }
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for numeric
    /// failures, 1 for anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
