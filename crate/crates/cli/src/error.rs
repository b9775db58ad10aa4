//! Command-line errors and their exit codes.

use std::path::{Path, PathBuf};

/// Exit code for success.
pub const EXIT_OK: u8 = 0;
/// Exit code for failures while running.
pub const EXIT_RUNTIME: u8 = 1;
/// Exit code for bad arguments, configs or missing inputs.
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, configs, missing inputs or refused overwrites.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] eksft::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if e.is_usage() => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}
