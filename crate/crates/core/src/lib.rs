//! Numerical laboratory for the sharp-interface Ohta–Kawasaki (nuclear
//! liquid-drop) energy on the three-dimensional flat torus in the
//! low-volume-fraction regime.
//!
//! Configurations are unions of non-overlapping balls ("droplets"). Their
//! periodic Coulomb energy is computed exactly through an Ewald-evaluated
//! Green's function, the whole-space self-energy problem is solved under the
//! ball ansatz, and the [`gamma_analysis`] module checks the macroscopic
//! predictions (optimal energy density `λ f*`, droplet mass `m*`, droplet
//! counts, equidistribution of mass and energy).
//!
//! Modelling hypothesis used throughout: every whole-space minimizer is a
//! ball ([`BALL_ANSATZ`]).

pub mod drop_model;
pub mod error;
pub mod gamma_analysis;
pub mod geometry;
pub mod kernel;
pub mod minimizer;
pub mod quadrature;
mod overlap;
mod spectral;
pub mod torus_energy;

pub use error::{Error, Result};

/// Statement of the ball ansatz, embedded in every report header.
pub const BALL_ANSATZ: &str =
    "ball ansatz: whole-space minimizers are modeled as balls, generalized minimizers as finite ball collections";
