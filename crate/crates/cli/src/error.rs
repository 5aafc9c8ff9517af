use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated, need {expected} bytes but file has {got}")]
    Truncated { path: PathBuf, expected: u64, got: u64 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{0}")]
    Format(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] winojoint::Error),
}

impl CliError {
    pub const EXIT_CONFIG: i32 = 2;
    pub const EXIT_IO: i32 = 3;
    pub const EXIT_NUMERIC: i32 = 4;
    pub const EXIT_FORMAT: i32 = 5;
    pub const EXIT_OTHER: i32 = 1;

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use winojoint::Error as E;
        match self {
            CliError::Config(_) => Self::EXIT_CONFIG,
            CliError::Io { .. } => Self::EXIT_IO,
            CliError::BadMagic { .. } | CliError::Truncated { .. } | CliError::CountMismatch { .. } | CliError::Format(_) => {
                Self::EXIT_FORMAT
            }
            CliError::Numeric(_) => Self::EXIT_NUMERIC,
            CliError::Core(e) => match e {
                E::Numeric(_) => Self::EXIT_NUMERIC,
                E::Format { .. } | E::CorruptStream { .. } | E::Crc { .. } => Self::EXIT_FORMAT,
                E::Io(_) => Self::EXIT_IO,
                E::InvalidArgument(_) | E::Unsupported(_) => Self::EXIT_CONFIG,
                _ => Self::EXIT_OTHER,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
