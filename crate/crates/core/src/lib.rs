//! Numerical workbench for stochastic-periodic homogenization of Maxwell's
//! equations with monotone nonlinear conductivity.
//!
//! The crate realizes the oscillatory problem on a staggered grid, the
//! periodic and stochastic cell problems, the homogenized limit system and
//! the two-scale pairings that connect them.

pub mod cell;
pub mod coefficients;
pub mod config;
pub mod eps_solver;
pub mod experiment;
pub mod error;
pub mod galerkin;
pub mod hom_solver;
pub mod io;
pub mod probability;
pub mod profile;
pub mod twoscale;
pub mod yee;

pub use error::{Error, Result};
