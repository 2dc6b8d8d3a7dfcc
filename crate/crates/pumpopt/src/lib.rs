//! Boundary-integral Stokes solver and adjoint shape optimizer for
//! two-dimensional peristaltic pumps in the wave frame.

pub mod cli_io;
pub mod error;
pub mod functionals;
pub mod geometry;
pub mod kernels;
pub mod linalg;
pub mod optimizer;
pub mod periodic_bie;
pub mod shape_calculus;
pub mod spectral;

pub use error::{Error, Result};
