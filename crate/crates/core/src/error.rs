use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scan contains no points")]
    EmptyScan,

    #[error("point at the sensor origin has no observation direction")]
    DegeneratePoint,

    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("corners do not form a box: worst corner residual {residual:.4} m")]
    BoxFit { residual: f64 },

    #[error("layer `{layer}`: {detail}")]
    Shape { layer: String, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("calibration: {0}")]
    Calibration(String),

    #[error("box corner lies behind the camera (depth {depth:.3} m)")]
    BehindCamera { depth: f64 },

    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Divergence { iteration: usize, loss: f64 },

    #[error("could not place vehicle after {0} attempts")]
    Placement(usize),

    #[error("contract violation: {0}")]
    Contract(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }
}
