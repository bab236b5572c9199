use std::path::PathBuf;

/// Errors produced by the facefuse library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt image data: {0}")]
    CorruptData(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image range violation: {0}")]
    RangeViolation(String),

    #[error("mask is not binary: {0}")]
    NonBinaryMask(String),

    #[error("window of size {window} does not fit a {height}x{width} image")]
    WindowTooLarge {
        window: usize,
        height: usize,
        width: usize,
    },

    #[error("embedding is not L2-normalized (norm = {0})")]
    UnnormalizedEmbedding(f64),

    #[error("external embedder is not available: {0}")]
    ExternalEmbedderUnavailable(String),

    #[error("training diverged at step {step}: {what} is not finite")]
    Divergence { step: usize, what: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("no matching files between {ref_dir} and {test_dir}")]
    EmptyIntersection { ref_dir: PathBuf, test_dir: PathBuf },

    #[error("missing mask for {0}")]
    MissingMask(String),
}

pub type Result<T> = std::result::Result<T, Error>;
