use thiserror::Error;

use crate::discretization::DiscretizationError;
use crate::geometry::GeometryError;
use crate::problem::DataError;
use crate::transform::TransformError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Discretization(#[from] DiscretizationError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("field leaves the channel region at ({0}, {1})")]
    OutOfLayer(f64, f64),
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("states at different times: {0} and {1}")]
    TimeMismatch(f64, f64),
    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),
    #[error("folded cell at node {node}: triangle {triangle} has area {area:e}")]
    FoldedCell { node: usize, triangle: usize, area: f64 },
    #[error("invalid time stepping: {0}")]
    TimeStepping(String),
    #[error("configuration error for `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
