//! Diffusion on the constant-energy, constant-momentum sphere of an
//! `N`-particle system, its exact spectral solution, the marginal hierarchy,
//! and the `N -> inf` kinetic Fokker–Planck equation, with the numerical
//! cross-checks that tie them together.

pub mod diagnostics;
pub mod error;
pub mod fokker_planck;
pub mod geometry;
pub mod grid;
pub mod markov;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod specfun;
pub mod spectral;

pub use error::{Error, Result};
pub use model::{derive_params, SystemParams, TimeScale, VelocityState, WState};
