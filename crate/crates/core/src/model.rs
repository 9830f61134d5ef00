//! Conserved ensemble data and micro-states.
//!
//! An `N`-particle micro-state lives on the manifold of fixed total momentum
//! `N u0` and fixed total kinetic energy `N e0` (unit particle mass). That
//! manifold is a `3N-4` sphere of radius `sqrt(2 N eps0)` centred at
//! `(u0, ..., u0)`, with `eps0 = e0 - |u0|^2 / 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Default constraint tolerance, in units where `eps0 = O(1)`.
pub const TOL_CONSTRAINT: f64 = 1e-10;

/// Particle mass. Variable masses are not supported.
pub const PARTICLE_MASS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub n_particles: usize,
    pub u0: Vec3,
    pub e0: f64,
    pub eps0: f64,
}

impl SystemParams {
    /// Builds parameters from drift velocity, energy per particle and particle count.
    pub fn derive(u0: Vec3, e0: f64, n_particles: usize) -> Result<Self> {
        if n_particles < 2 {
            return Err(Error::TooFewParticles(n_particles));
        }
        if !e0.is_finite() || u0.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite u0 or e0".into()));
        }
        let half_u2 = 0.5 * norm2(&u0);
        let eps0 = e0 - half_u2;
        if eps0 <= 0.0 {
            return Err(Error::DegenerateManifold { e0, half_u2 });
        }
        Ok(SystemParams {
            n_particles,
            u0,
            e0,
            eps0,
        })
    }

    /// Same ensemble data with a different particle count.
    pub fn with_particles(&self, n_particles: usize) -> Result<Self> {
        Self::derive(self.u0, self.e0, n_particles)
    }

    pub fn radius_squared(&self) -> f64 {
        2.0 * self.n_particles as f64 * self.eps0
    }

    pub fn radius(&self) -> f64 {
        self.radius_squared().sqrt()
    }

    /// Temperature of the limiting Maxwellian, `T = 2 eps0 / 3`.
    pub fn temperature(&self) -> f64 {
        2.0 * self.eps0 / 3.0
    }

    /// Dimension `3N - 3` of the linear space holding the manifold sphere.
    pub fn sphere_ambient_dim(&self) -> usize {
        3 * (self.n_particles - 1)
    }
}

/// `derive_params` under its operation name.
pub fn derive_params(u0: Vec3, e0: f64, n_particles: usize) -> Result<SystemParams> {
    SystemParams::derive(u0, e0, n_particles)
}

/// Velocities `v_1..v_N` in physical coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityState {
    pub v: Vec<Vec3>,
    pub params: SystemParams,
}

impl VelocityState {
    pub fn new(v: Vec<Vec3>, params: SystemParams) -> Result<Self> {
        if v.len() != params.n_particles {
            return Err(Error::ParticleCountMismatch {
                expected: params.n_particles,
                got: v.len(),
            });
        }
        Ok(VelocityState { v, params })
    }

    pub fn n(&self) -> usize {
        self.v.len()
    }

    /// Flat `3N` view, particle-major.
    pub fn flat(&self) -> Vec<f64> {
        self.v.iter().flat_map(|p| p.iter().copied()).collect()
    }

    /// Whether both manifold residuals pass `tol_constraint` (scaled by `sqrt N`
    /// for momentum and `N` for energy).
    pub fn satisfies_constraints(&self, tol: f64) -> bool {
        let (dp, de) = manifold_residuals(self);
        let n = self.n() as f64;
        norm2(&dp).sqrt() <= tol * n.sqrt() && de.abs() <= tol * n
    }
}

/// Truncated rotated coordinates `w_1..w_{N-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WState {
    pub w: Vec<Vec3>,
    pub params: SystemParams,
}

impl WState {
    pub fn norm_squared(&self) -> f64 {
        self.w.iter().map(norm2).sum()
    }

    pub fn satisfies_constraints(&self, tol: f64) -> bool {
        let n = self.params.n_particles as f64;
        (self.norm_squared() - self.params.radius_squared()).abs() <= tol * n
    }
}

/// Master-equation time `tau` and kinetic time `t`, tied by `tau = (2/3) eps0 t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeScale {
    tau: f64,
    t: f64,
}

impl TimeScale {
    pub fn from_kinetic(t: f64, eps0: f64) -> Self {
        TimeScale {
            tau: 2.0 / 3.0 * eps0 * t,
            t,
        }
    }

    pub fn from_master(tau: f64, eps0: f64) -> Self {
        TimeScale {
            tau,
            t: 1.5 * tau / eps0,
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn t(&self) -> f64 {
        self.t
    }
}

/// Returns `sum v_k - N u0` and `sum |v_k|^2 / 2 - N e0`.
pub fn manifold_residuals(state: &VelocityState) -> (Vec3, f64) {
    let p = &state.params;
    let n = state.n() as f64;
    let mut mom = [0.0; 3];
    let mut energy = 0.0;
    for v in &state.v {
        for k in 0..3 {
            mom[k] += v[k];
        }
        energy += 0.5 * norm2(v);
    }
    for k in 0..3 {
        mom[k] -= n * p.u0[k];
    }
    (mom, energy - n * p.e0)
}

#[inline]
pub fn norm2(v: &Vec3) -> f64 {
    v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
}
