use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation: quaternion has zero norm")]
    DegenerateRotation,

    #[error("covariance is singular even after regularization")]
    SingularCovariance,

    #[error("index {index} out of range for cloud of {len} gaussians")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("stale render: contribution records do not belong to this cloud/camera")]
    StaleRender,

    #[error("non-finite loss at iteration {iteration} (view {view_id}, {n_gaussians} gaussians)")]
    NonFiniteLoss {
        iteration: usize,
        view_id: u32,
        n_gaussians: usize,
        dump: Option<PathBuf>,
    },

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error in {}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
