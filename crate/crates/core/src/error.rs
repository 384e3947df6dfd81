use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate quaternion blend (weighted sum has norm {0:e})")]
    DegenerateBlend(f64),

    #[error("timestep {t} out of range (T = {len})")]
    TimestepOutOfRange { t: usize, len: usize },

    #[error("point is behind the camera (depth {0:e})")]
    BehindCamera(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("overlap is undefined for an empty observation set")]
    UndefinedOverlap,

    #[error("no labeled gaussians available for voting")]
    NoLabeledGaussians,

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("missing rigid trajectory for rigid group {0}")]
    MissingRigidTrajectory(usize),

    #[error("trajectory mismatch: {0}")]
    TrajectoryMismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no forecaster for group {0}")]
    MissingModel(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    /// Whether the error comes from a numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::DegenerateBlend(_) | Error::DegenerateGeometry(_)
        )
    }
}
