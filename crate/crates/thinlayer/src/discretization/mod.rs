//! P1 finite elements: meshes, quadrature, assembly, sparse systems and linear solves.

pub mod assembly;
pub mod mesh;
pub mod quadrature;
pub mod solve;
pub mod sparse;

pub use assembly::*;
pub use mesh::*;
pub use solve::*;
pub use sparse::*;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscretizationError {
    #[error("mesh failure: {0}")]
    MeshFailure(String),
    #[error("nonpositive weight {value} at ({x}, {y})")]
    NonpositiveWeight { value: f64, x: f64, y: f64 },
    #[error("coefficient is not symmetric positive semidefinite: {0}")]
    NotSPD(String),
    #[error("unknown boundary tag `{0}`")]
    UnknownTag(String),
    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}
