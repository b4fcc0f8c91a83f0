//! Reaction–diffusion–advection in a thin layer of evolving channels between two bulk
//! domains, and its homogenized limit.

pub mod discretization;
pub mod geometry;
pub mod harness;
pub mod transform;
pub mod error;
pub mod macro_solver;
pub mod micro;
pub mod problem;
pub mod unfolding;

pub use error::{Error, Result};

