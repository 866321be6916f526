//! Simulation and linearized stability analysis for age-structured population
//! models with spatial diffusion.
//!
//! The crate evolves the nonlinear dynamics along characteristics, computes
//! equilibria, assembles the linearized eigenvalue system as finite matrices,
//! and derives stability verdicts that are cross-checked against time-domain
//! simulation.

pub mod cli;
pub mod diffusion;
pub mod equilibrium;
pub mod error;
pub mod expr;
pub mod linearization;
pub mod model;
pub mod spectral;
pub mod stability;
pub mod transport;

pub use error::{Error, Result};
