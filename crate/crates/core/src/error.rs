use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Every column of some softmax row is masked out. At an attention
    /// resolution this means the mask covers the whole feature map.
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("timestep error: {0}")]
    Timestep(String),

    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    #[error("unsupported archive version {found} (expected {expected})")]
    ArchiveVersion { found: u16, expected: u16 },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged {
        step: usize,
        loss: f64,
        /// Weights from the last step whose loss was finite.
        last_good: Box<crate::denoiser::Weights>,
    },

    #[error("corpus error in scene {scene}: {reason}")]
    Corpus { scene: String, reason: String },

    #[error("corpus integrity error: {0}")]
    Integrity(String),

    #[error("scene generation failed: {0}")]
    SceneGeneration(String),

    #[error("image error at {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by invalid user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::DegenerateMask(_) | Error::Dimension(_) | Error::Timestep(_)
        )
    }
}
