//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors raised by kernels, models, objectives, training loops and file IO.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// NaN/Inf or another numerically invalid value.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Invalid configuration or hyperparameter.
    #[error("config error: {0}")]
    Config(String),
    /// Invalid input data (token ids, distributions, masks, batches).
    #[error("input error: {0}")]
    Input(String),
    /// Sequence longer than the model context.
    #[error("length error: sequence of {len} tokens exceeds context length {context_len}")]
    Length { len: usize, context_len: usize },
    /// Input that makes an objective undefined (e.g. no valid tokens).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// Text contains a glyph outside the vocabulary.
    #[error("tokenization error: unknown character {ch:?} at offset {offset}")]
    Tokenize { ch: char, offset: usize },
    /// Dataset generation cannot satisfy the requested counts.
    #[error("generation error: {0}")]
    Generation(String),
    /// Checkpoint manifest is unreadable or malformed.
    #[error("corrupt checkpoint manifest {path}: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },
    /// Checkpoint tensor shape disagrees with its config.
    #[error("checkpoint shape mismatch for tensor {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    /// Checkpoint weight blob is shorter than the manifest promises.
    #[error("truncated checkpoint blob {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    /// Manifest config hash does not match the hash of its config.
    #[error("config hash mismatch: manifest says {manifest}, config hashes to {computed}")]
    ConfigHashMismatch { manifest: String, computed: String },
    /// CSV/SVG export problem.
    #[error("export error: {0}")]
    Export(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user-supplied configuration or arguments,
    /// as opposed to failures while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Input(_)
                | Error::Length { .. }
                | Error::Tokenize { .. }
                | Error::Generation(_)
                | Error::CorruptManifest { .. }
                | Error::ShapeMismatch { .. }
                | Error::Truncated { .. }
                | Error::ConfigHashMismatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
