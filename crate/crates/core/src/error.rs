use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch (expected {expected}, got {got})")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("construction failed: {0}")]
    Construction(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed data at byte {pos}: {msg}")]
    Format { pos: usize, msg: String },

    #[error("corrupt code stream at bit {bit}: {msg}")]
    CorruptStream { bit: u64, msg: String },

    #[error("CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { stored: u32, computed: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::Dimension {
            op,
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }
}
