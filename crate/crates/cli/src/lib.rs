pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod idx;

pub use error::{CliError, Result};
pub use idx::ingest_idx;
