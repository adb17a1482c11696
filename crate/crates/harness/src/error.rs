use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: String },
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] fusionlab_core::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        use fusionlab_core::Error as E;
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::NonFinite { .. } => EXIT_NUMERIC,
            HarnessError::Io(_) => EXIT_IO,
            HarnessError::Core(E::Io(_) | E::Checkpoint(_)) => EXIT_IO,
            HarnessError::Core(_) => EXIT_CONFIG,
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
