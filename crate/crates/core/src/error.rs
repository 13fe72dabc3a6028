use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),

    #[error("no diffusion-weighted measurements (every b-value is below the b0 threshold)")]
    NoDiffusionData,

    #[error("rejection sampling gave up after {0} attempts; sampler constraints are inconsistent")]
    SamplingExhausted(usize),

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line tool: 2 for bad input,
    /// 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::SamplingExhausted(_) => 3,
            _ => 2,
        }
    }
}
