//! Local stable and unstable invariant manifolds of semilinear parabolic
//! equations `u_t + A u = f(u)` on planar domains, and their behaviour under
//! singular perturbations of the domain.
//!
//! Every domain lives inside a common box discretized by a uniform grid;
//! functions on a subdomain are compared in `L^2` of the box through
//! extension by zero.

pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod lab;
pub mod linalg;
pub mod manifolds;
pub mod operators;
pub mod perturbation;
pub mod spectral;

pub use error::{Error, Result};
