//! Numerical laboratory for the stochastic heat equation
//! ∂_t u = ½Δu + σ(u)ξ on the sphere of radius R, with noise white in time
//! and coloured in space.

pub mod cli;
pub mod error;
pub mod functionals;
pub mod geometry;
pub mod heat_kernel;
pub mod legendre;
pub mod montecarlo;
pub mod noise;
pub mod quadrature;
pub mod report;
pub mod ring;
pub mod solver;

pub use error::{Error, Result};
