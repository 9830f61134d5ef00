//! The limit kinetic equation `d_t f = d_v . (T d_v f + (v - u) f)`:
//! Mehler propagation, moment functionals and their closed-form flows, the
//! nonlinear-coefficient form, Maxwellian equilibrium, relative entropy, and
//! finite-difference residuals of the marginal hierarchy.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Axis, DensityGrid};
use crate::model::{norm2, SystemParams, TimeScale, Vec3};
use crate::spectral::maxwellian_density;

/// Mass, momentum and energy of a one-velocity density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub m: f64,
    pub p: Vec3,
    pub e: f64,
}

impl MomentState {
    /// `e >= |p|^2 / (2m)`.
    pub fn is_realizable(&self) -> bool {
        self.m > 0.0 && self.e + 1e-14 * self.e.abs() >= 0.5 * norm2(&self.p) / self.m
    }

    /// Moments of the Maxwellian with mass `m`, drift `u`, temperature `T`.
    pub fn maxwellian(m: f64, u: Vec3, temperature: f64) -> Self {
        MomentState {
            m,
            p: [m * u[0], m * u[1], m * u[2]],
            e: m * (1.5 * temperature + 0.5 * norm2(&u)),
        }
    }
}

fn check_kernel(temperature: f64, t: f64) -> Result<()> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("kernel time must be > 0, got {t}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    Ok(())
}

/// Green function from `w` to `v` after kinetic time `t`: a Gaussian in `v`
/// with mean `u + (w - u) e^{-t}` and per-axis variance `T (1 - e^{-2t})`.
pub fn mehler_kernel(w: &Vec3, v: &Vec3, u: &Vec3, temperature: f64, t: f64) -> Result<f64> {
    check_kernel(temperature, t)?;
    let decay = (-t).exp();
    let var = temperature * -(-2.0 * t).exp_m1();
    let mut d2 = 0.0;
    for c in 0..3 {
        let d = v[c] - u[c] - (w[c] - u[c]) * decay;
        d2 += d * d;
    }
    Ok((2.0 * PI * var).powf(-1.5) * (-0.5 * d2 / var).exp())
}

fn kernel_1d(w: f64, v: f64, u: f64, decay: f64, var: f64) -> f64 {
    let d = v - u - (w - u) * decay;
    (-0.5 * d * d / var).exp() / (2.0 * PI * var).sqrt()
}

/// Propagates a density on a grid with `3n` axes by kinetic time `t`, one
/// axis at a time (the kernel factorizes over axes and velocities).
///
/// Axes that carry the Gauss-Hermite rule matched to `(u_c, T)` use the
/// Mehler expansion of the kernel in Hermite functions, which on those
/// nodes is an exact discrete semigroup; any other axis uses direct
/// quadrature against the kernel.
pub fn propagate(f0: &DensityGrid, t: f64, u: &Vec3, temperature: f64) -> Result<DensityGrid> {
    check_kernel(temperature, t)?;
    if f0.dim() % 3 != 0 {
        return Err(Error::InvalidArgument(format!(
            "grid has {} axes, expected a multiple of 3",
            f0.dim()
        )));
    }
    let mut values = f0.values.clone();
    let strides = f0.strides();
    for (a, ax) in f0.axes.iter().enumerate() {
        let uc = u[a % 3];
        let op = if matched_hermite(ax, uc, temperature) {
            hermite_operator(ax, uc, temperature, t)
        } else {
            direct_operator(ax, uc, temperature, t)
        };
        apply_along(&mut values, &op, ax.len(), strides[a]);
    }
    Ok(f0.with_values(values))
}

/// Propagation by master time `tau` under the limit generator.
pub fn propagate_master(f0: &DensityGrid, tau: f64, params: &SystemParams) -> Result<DensityGrid> {
    let t = TimeScale::from_master(tau, params.eps0).t();
    propagate(f0, t, &params.u0, params.temperature())
}

fn matched_hermite(ax: &Axis, u: f64, temperature: f64) -> bool {
    if ax.len() < 2 {
        return false;
    }
    let reference = Axis::gauss_hermite(ax.len(), u, temperature);
    ax.nodes
        .iter()
        .zip(&reference.nodes)
        .chain(ax.weights.iter().zip(&reference.weights))
        .all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0))
}

/// Dense `K x K` operator `out_i = sum_j op[i][j] in_j`.
fn direct_operator(ax: &Axis, u: f64, temperature: f64, t: f64) -> Vec<f64> {
    let k = ax.len();
    let decay = (-t).exp();
    let var = temperature * -(-2.0 * t).exp_m1();
    let mut op = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            op[i * k + j] = ax.weights[j] * kernel_1d(ax.nodes[j], ax.nodes[i], u, decay, var);
        }
    }
    op
}

/// Truncated Mehler expansion on matched Gauss-Hermite nodes:
/// `f_i = e^{-x_i^2} sum_m psi_m(x_i) e^{-m t} sum_j W_j f_j psi_m(x_j) / s`
/// with `x = (v - u)/s`, `s = sqrt(2T)`, `psi_m` orthonormal under `e^{-x^2}`.
fn hermite_operator(ax: &Axis, u: f64, temperature: f64, t: f64) -> Vec<f64> {
    let k = ax.len();
    let s = (2.0 * temperature).sqrt();
    let x: Vec<f64> = ax.nodes.iter().map(|v| (v - u) / s).collect();
    let psi: Vec<Vec<f64>> = x.iter().map(|&xi| hermite_functions(k, xi)).collect();
    let mut op = vec![0.0; k * k];
    for i in 0..k {
        let gi = (-x[i] * x[i]).exp();
        for j in 0..k {
            let mut acc = 0.0;
            let mut decay = 1.0;
            let step = (-t).exp();
            for m in 0..k {
                acc += psi[i][m] * psi[j][m] * decay;
                decay *= step;
            }
            op[i * k + j] = gi * acc * ax.weights[j] / s;
        }
    }
    op
}

/// `psi_0..psi_{k-1}` at `x`, orthonormal under `e^{-x^2}`.
fn hermite_functions(k: usize, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; k];
    out[0] = PI.powf(-0.25);
    if k > 1 {
        out[1] = 2f64.sqrt() * x * out[0];
    }
    for m in 1..k.saturating_sub(1) {
        let mf = m as f64;
        out[m + 1] = (2.0 / (mf + 1.0)).sqrt() * x * out[m] - (mf / (mf + 1.0)).sqrt() * out[m - 1];
    }
    out
}

fn apply_along(values: &mut [f64], op: &[f64], k: usize, stride: usize) {
    let block = k * stride;
    let mut line = vec![0.0; k];
    let mut res = vec![0.0; k];
    for base in (0..values.len()).step_by(block) {
        for off in 0..stride {
            for (i, l) in line.iter_mut().enumerate() {
                *l = values[base + off + i * stride];
            }
            for (i, r) in res.iter_mut().enumerate() {
                *r = op[i * k..(i + 1) * k].iter().zip(&line).map(|(a, b)| a * b).sum();
            }
            for (i, r) in res.iter().enumerate() {
                values[base + off + i * stride] = *r;
            }
        }
    }
}

/// Quadrature mass, momentum and energy of a one-velocity grid.
pub fn functionals(f: &DensityGrid) -> MomentState {
    assert_eq!(f.dim(), 3, "functionals need a one-velocity grid");
    let mut x = [0.0; 3];
    let mut m = 0.0;
    let mut p = [0.0; 3];
    let mut e = 0.0;
    for flat in 0..f.len() {
        f.point_into(flat, &mut x);
        let wf = f.weight(flat) * f.values[flat];
        m += wf;
        for c in 0..3 {
            p[c] += wf * x[c];
        }
        e += 0.5 * wf * norm2(&x);
    }
    MomentState { m, p, e }
}

/// Closed-form solution of `m' = 0`, `p' = m u - p`, `e' = 3 T m - 2 e + u.p`.
pub fn moment_flow(initial: &MomentState, u: &Vec3, temperature: f64, t: f64) -> Result<MomentState> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("t must be >= 0, got {t}")));
    }
    let m = initial.m;
    let d1 = (-t).exp();
    let d2 = d1 * d1;
    let delta: Vec3 = std::array::from_fn(|c| initial.p[c] - m * u[c]);
    let p = std::array::from_fn(|c| m * u[c] + delta[c] * d1);
    let e_inf = 1.5 * temperature * m + 0.5 * m * norm2(u);
    let ud = u[0] * delta[0] + u[1] * delta[1] + u[2] * delta[2];
    let e = e_inf + ud * d1 + (initial.e - e_inf - ud) * d2;
    Ok(MomentState { m, p, e })
}

fn regular_spacings(f: &DensityGrid) -> Result<Vec<f64>> {
    f.axes
        .iter()
        .map(|a| {
            a.spacing()
                .ok_or_else(|| Error::InvalidArgument("finite differences need regular axes".into()))
        })
        .collect()
}

/// Divergence of the flux `D d_c f + (a v_c - b_c) f` along each axis with
/// zero flux through the grid boundary. The drift flux at a midpoint is the
/// average of its values at the two nodes, which keeps the discrete mass,
/// momentum and energy balances exact.
fn flux_divergence(f: &DensityGrid, d: f64, a: f64, b: &Vec3) -> Result<DensityGrid> {
    if f.dim() != 3 {
        return Err(Error::InvalidArgument("kinetic RHS needs a one-velocity grid".into()));
    }
    let h = regular_spacings(f)?;
    let strides = f.strides();
    let shape = f.shape();
    let mut out = vec![0.0; f.len()];
    let mut idx = [0usize; 3];
    for flat in 0..f.len() {
        f.unravel(flat, &mut idx);
        let mut acc = 0.0;
        for c in 0..3 {
            let k = idx[c];
            let s = strides[c];
            let flux = |lo: usize| {
                let (fl, fh) = (f.values[lo], f.values[lo + s]);
                let vl = f.axes[c].nodes[(lo / s) % shape[c]];
                let vh = vl + h[c];
                d * (fh - fl) / h[c] + 0.5 * a * (vl * fl + vh * fh) - 0.5 * b[c] * (fl + fh)
            };
            let right = if k + 1 < shape[c] { flux(flat) } else { 0.0 };
            let left = if k > 0 { flux(flat - s) } else { 0.0 };
            acc += (right - left) / h[c];
        }
        out[flat] = acc;
    }
    Ok(f.with_values(out))
}

/// `d_v . ((1/3)(2 e m - |p|^2) d_v f + (m v - p) f)` with `(m, p, e)` taken
/// from `f` itself.
pub fn nonlinear_rhs(f: &DensityGrid) -> Result<DensityGrid> {
    let mom = functionals(f);
    let d = (2.0 * mom.e * mom.m - norm2(&mom.p)) / 3.0;
    flux_divergence(f, d, mom.m, &mom.p)
}

/// `d_v . (T d_v f + (v - u) f)`, same discretization.
pub fn linear_rhs(f: &DensityGrid, u: &Vec3, temperature: f64) -> Result<DensityGrid> {
    flux_divergence(f, temperature, 1.0, u)
}

/// Drifting Maxwellian with mean `u0` and temperature `2 eps0 / 3`.
pub fn maxwellian(params: &SystemParams, v: &Vec3) -> f64 {
    maxwellian_density(v, params)
}

/// Density floor applied before taking logarithms.
pub const ENTROPY_FLOOR: f64 = 1e-300;

/// `S(f | f_M) = -int f ln(f / f_M)`, with `0 ln 0 = 0`.
pub fn relative_entropy(f: &DensityGrid, params: &SystemParams) -> Result<f64> {
    if f.dim() != 3 {
        return Err(Error::InvalidArgument("entropy needs a one-velocity grid".into()));
    }
    let mut x = [0.0; 3];
    let mut s = 0.0;
    for flat in 0..f.len() {
        let fv = f.values[flat];
        if fv < -1e-12 {
            return Err(Error::InvalidArgument(format!("negative density {fv}")));
        }
        if fv <= 0.0 {
            continue;
        }
        f.point_into(flat, &mut x);
        let m = maxwellian(params, &x).max(ENTROPY_FLOOR);
        s -= f.weight(flat) * fv * (fv.max(ENTROPY_FLOOR) / m).ln();
    }
    Ok(s)
}

/// Generator of the order-`n` marginal equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    FiniteN(usize),
    Limit,
}

/// Largest `|d_tau F - L F|` over interior grid points, `L F` by centered
/// differences. The grid must be regular with spacing at most
/// `0.1 sqrt(2 eps0 / 3)` on every axis.
///
/// Finite `N` (coordinates `z = v - u0`, `3n` of them, `R^2 = 2 N eps0`):
///
/// ```text
/// L F = sum_ab M_ab d_ab F - (3n+1)/R^2 z.grad F + beta (3n F + z.grad F)
/// M_ab = delta_ab - [same component]/N - z_a z_b / R^2
/// beta = (3(N-n) - 5) / R^2
/// ```
///
/// Limit: `L F = lap F + (3/(2 eps0)) (3n F + z.grad F)`.
pub fn generator_residual(
    f: &DensityGrid,
    dfdtau: &DensityGrid,
    generator: Generator,
    params: &SystemParams,
) -> Result<f64> {
    if !f.same_axes(dfdtau) {
        return Err(Error::InvalidArgument("grids differ".into()));
    }
    let dim = f.dim();
    if dim == 0 || dim % 3 != 0 {
        return Err(Error::InvalidArgument(format!("{dim} axes is not an order-n grid")));
    }
    let n = dim / 3;
    let h = regular_spacings(f)?;
    let limit = 0.1 * params.temperature().sqrt();
    for &hc in &h {
        if hc > limit * (1.0 + 1e-12) {
            return Err(Error::GridTooCoarse { spacing: hc, limit });
        }
    }
    let (diag_corr, mix_n, r2, beta, grad_corr) = match generator {
        Generator::FiniteN(big_n) => {
            if big_n < n + 2 {
                return Err(Error::InvalidArgument(format!(
                    "order {n} marginal needs N >= {}",
                    n + 2
                )));
            }
            let r2 = 2.0 * big_n as f64 * params.eps0;
            let beta = (3.0 * (big_n - n) as f64 - 5.0) / r2;
            (true, 1.0 / big_n as f64, r2, beta, (3 * n + 1) as f64 / r2)
        }
        Generator::Limit => (false, 0.0, f64::INFINITY, 1.5 / params.eps0, 0.0),
    };
    let shape = f.shape();
    let strides = f.strides();
    let mut idx = vec![0usize; dim];
    let mut z = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut worst: f64 = 0.0;
    let val = |flat: usize| f.values[flat];
    'points: for flat in 0..f.len() {
        f.unravel(flat, &mut idx);
        for a in 0..dim {
            if idx[a] == 0 || idx[a] + 1 >= shape[a] {
                continue 'points;
            }
            z[a] = f.axes[a].nodes[idx[a]] - params.u0[a % 3];
        }
        let f0 = val(flat);
        let mut rhs = 0.0;
        for a in 0..dim {
            let (p, m) = (val(flat + strides[a]), val(flat - strides[a]));
            grad[a] = (p - m) / (2.0 * h[a]);
            let d2 = (p - 2.0 * f0 + m) / (h[a] * h[a]);
            let mut coef = 1.0;
            if diag_corr {
                coef -= mix_n + z[a] * z[a] / r2;
            }
            rhs += coef * d2;
        }
        if diag_corr {
            for a in 0..dim {
                for b in a + 1..dim {
                    let mut coef = -z[a] * z[b] / r2;
                    if a % 3 == b % 3 {
                        coef -= mix_n;
                    }
                    let (sa, sb) = (strides[a], strides[b]);
                    let mixed = (val(flat + sa + sb) - val(flat + sa - sb) - val(flat - sa + sb)
                        + val(flat - sa - sb))
                        / (4.0 * h[a] * h[b]);
                    rhs += 2.0 * coef * mixed;
                }
            }
        }
        let zg: f64 = z.iter().zip(&grad).map(|(a, b)| a * b).sum();
        rhs += -grad_corr * zg + beta * (dim as f64 * f0 + zg);
        worst = worst.max((dfdtau.values[flat] - rhs).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::derive_params;
    use crate::spectral::{MultiIndex, SeriesEvaluator, SeriesMode, SpectralExpansion};
    use std::collections::BTreeMap;

    fn params() -> SystemParams {
        derive_params([0.3, -0.2, 0.1], 1.2 + 0.5 * 0.14, 8).unwrap()
    }

    fn gh_axes(p: &SystemParams, k: usize) -> Vec<Axis> {
        (0..3).map(|c| Axis::gauss_hermite(k, p.u0[c], p.temperature())).collect()
    }

    fn shifted_maxwellian(p: &SystemParams, shift: Vec3, axes: Vec<Axis>) -> DensityGrid {
        let t = p.temperature();
        DensityGrid::from_fn(1, axes, |x| {
            let d2: f64 = (0..3).map(|c| (x[c] - p.u0[c] - shift[c]).powi(2)).sum();
            (2.0 * PI * t).powf(-1.5) * (-0.5 * d2 / t).exp()
        })
    }

    #[test]
    fn kernel_examples() {
        let u = [0.2, 0.0, -0.1];
        let w = [1.0, 2.0, -1.0];
        let v = [0.5, -0.3, 0.4];
        let k = mehler_kernel(&w, &v, &u, 1.3, 50.0).unwrap();
        let d2: f64 = (0..3).map(|c| (v[c] - u[c]).powi(2)).sum();
        let m = (2.0 * PI * 1.3f64).powf(-1.5) * (-d2 / 2.6).exp();
        assert!((k / m - 1.0).abs() < 1e-12);
        assert!(mehler_kernel(&w, &v, &u, 1.0, 0.0).is_err());
        assert!(mehler_kernel(&w, &v, &u, 0.0, 1.0).is_err());

        // variance 3/4 at t = ln 2 around the origin
        let t = 2f64.ln();
        let zero = [0.0; 3];
        let k0 = mehler_kernel(&zero, &zero, &zero, 1.0, t).unwrap();
        assert!((k0 - (2.0 * PI * 0.75f64).powf(-1.5)).abs() < 1e-14);

        let ax: Vec<Axis> = (0..3).map(|c| Axis::gauss_hermite(30, u[c] + (w[c] - u[c]) * 0.5, 0.75)).collect();
        let g = DensityGrid::from_fn(1, ax, |x| mehler_kernel(&w, &[x[0], x[1], x[2]], &u, 1.0, t).unwrap());
        assert!((g.mass() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn maxwellian_is_stationary_and_moments_flow() {
        let p = params();
        let ax = gh_axes(&p, 40);
        let m0 = shifted_maxwellian(&p, [0.0; 3], ax.clone());
        let out = propagate(&m0, 0.7, &p.u0, p.temperature()).unwrap();
        for (a, b) in out.values.iter().zip(&m0.values) {
            assert!((a - b).abs() < 1e-8);
        }
        let f0 = shifted_maxwellian(&p, [0.5, -0.4, 0.3], ax);
        let init = functionals(&f0);
        for t in [0.1, 1.0, 5.0] {
            let f = propagate(&f0, t, &p.u0, p.temperature()).unwrap();
            let got = functionals(&f);
            let want = moment_flow(&init, &p.u0, p.temperature(), t).unwrap();
            assert!((got.m - 1.0).abs() < 1e-8);
            for c in 0..3 {
                assert!((got.p[c] - want.p[c]).abs() < 1e-6);
            }
            assert!((got.e - want.e).abs() < 1e-6);
            assert!(f.values.iter().all(|&x| x >= -1e-12));
        }
    }

    #[test]
    fn semigroup_on_hermite_and_regular_axes() {
        let p = params();
        let f0 = shifted_maxwellian(&p, [0.6, 0.0, -0.3], gh_axes(&p, 32));
        let a = propagate(&propagate(&f0, 0.3, &p.u0, p.temperature()).unwrap(), 0.5, &p.u0, p.temperature()).unwrap();
        let b = propagate(&f0, 0.8, &p.u0, p.temperature()).unwrap();
        assert!(a.l1_distance(&b).unwrap() < 1e-7);

        let sd = p.temperature().sqrt();
        let ax: Vec<Axis> = (0..3).map(|c| Axis::regular(p.u0[c] - 7.0 * sd, 0.1 * sd, 141)).collect();
        let g0 = shifted_maxwellian(&p, [0.3, 0.0, 0.0], ax);
        let g = propagate(&g0, 0.5, &p.u0, p.temperature()).unwrap();
        assert!((g.mass() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn moment_flow_examples() {
        let u = [0.4, -0.1, 0.2];
        let t = 0.9;
        let eq = MomentState::maxwellian(2.0, u, t);
        for time in [0.0, 0.5, 3.0] {
            let s = moment_flow(&eq, &u, t, time).unwrap();
            assert!((s.e - eq.e).abs() < 1e-14 && (s.m - 2.0).abs() == 0.0);
            for c in 0..3 {
                assert!((s.p[c] - eq.p[c]).abs() < 1e-14);
            }
        }
        let init = MomentState { m: 1.0, p: [0.0; 3], e: 4.0 };
        let s = moment_flow(&init, &[0.0; 3], 1.0, 0.8).unwrap();
        assert!((s.e - (1.5 + 2.5 * (-1.6f64).exp())).abs() < 1e-14);
        assert!(moment_flow(&init, &u, 1.0, -1.0).is_err());
        assert!(eq.is_realizable());
    }

    #[test]
    fn functionals_examples() {
        let p = params();
        let f = shifted_maxwellian(&p, [0.0; 3], gh_axes(&p, 40));
        let s = functionals(&f);
        assert!((s.m - 1.0).abs() < 1e-12);
        for c in 0..3 {
            assert!((s.p[c] - p.u0[c]).abs() < 1e-12);
        }
        assert!((s.e - (p.eps0 + 0.5 * norm2(&p.u0))).abs() < 1e-12);
        let mut g = f.clone();
        g.scale(2.5);
        let s2 = functionals(&g);
        assert!((s2.e - 2.5 * s.e).abs() < 1e-12);
        let a = [0.4, 0.0, -0.2];
        let sh = functionals(&shifted_maxwellian(&p, a, gh_axes(&p, 40)));
        for c in 0..3 {
            assert!((sh.p[c] - s.p[c] - a[c]).abs() < 1e-10);
        }
    }

    fn regular_axes(p: &SystemParams, half: f64, h: f64) -> Vec<Axis> {
        let k = (2.0 * half / h).round() as usize + 1;
        (0..3).map(|c| Axis::regular(p.u0[c] - half, h, k)).collect()
    }

    #[test]
    fn nonlinear_rhs_conserves_and_matches_linear() {
        let p = params();
        let sd = p.temperature().sqrt();
        let ax = regular_axes(&p, 6.0 * sd, 0.15 * sd);
        // non-Maxwellian: mixture of two displaced Gaussians
        let t = p.temperature();
        let f = DensityGrid::from_fn(1, ax.clone(), |x| {
            let g = |s: f64, c0: f64| {
                let d2: f64 = (0..3).map(|c| (x[c] - p.u0[c] - if c == 0 { c0 } else { 0.0 }).powi(2)).sum();
                (2.0 * PI * s).powf(-1.5) * (-0.5 * d2 / s).exp()
            };
            0.6 * g(0.8 * t, 0.4) + 0.4 * g(0.7 * t, -0.6)
        });
        let r = nonlinear_rhs(&f).unwrap();
        assert!(r.mass().abs() < 1e-6);
        for c in 0..3 {
            assert!(r.integrate_with(|x| x[c]).abs() < 1e-6);
        }
        assert!(r.integrate_with(|x| 0.5 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2])).abs() < 1e-6);

        let fm = functionals(&f);
        let scaled: Vec<f64> = f.values.iter().map(|v| v / fm.m).collect();
        let f1 = f.with_values(scaled);
        let mom = functionals(&f1);
        let u = [mom.p[0] / mom.m, mom.p[1] / mom.m, mom.p[2] / mom.m];
        let eps = mom.e - 0.5 * norm2(&mom.p);
        let lin = linear_rhs(&f1, &u, 2.0 * eps / 3.0).unwrap();
        let nl = nonlinear_rhs(&f1).unwrap();
        let scale = nl.values.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        for (a, b) in nl.values.iter().zip(&lin.values) {
            assert!((a - b).abs() < 1e-12 * scale.max(1.0));
        }

        let m = shifted_maxwellian(&p, [0.0; 3], ax);
        let rm = nonlinear_rhs(&m).unwrap();
        let peak = m.values.iter().fold(0.0f64, |a, b| a.max(*b));
        assert!(rm.values.iter().all(|v| v.abs() < 0.05 * peak));
    }

    #[test]
    fn entropy_properties() {
        let p = params();
        let ax = gh_axes(&p, 40);
        let m = shifted_maxwellian(&p, [0.0; 3], ax.clone());
        assert!(relative_entropy(&m, &p).unwrap().abs() < 1e-12);
        let mut seed = 17u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..20 {
            let a = [next() - 0.5, next() - 0.5, next() - 0.5];
            let lam = 0.2 + 0.6 * next();
            let g1 = shifted_maxwellian(&p, a, ax.clone());
            let g2 = shifted_maxwellian(&p, [-a[1], a[0], 0.3], ax.clone());
            let mix = g1.with_values(g1.values.iter().zip(&g2.values).map(|(x, y)| lam * x + (1.0 - lam) * y).collect());
            assert!(relative_entropy(&mix, &p).unwrap() < 0.0);
        }
        let mut neg = m.clone();
        neg.values[5] = -1e-6;
        assert!(relative_entropy(&neg, &p).is_err());
    }

    #[test]
    fn entropy_of_displaced_maxwellian_decays_at_rate_two() {
        let p = params();
        let a = [0.5, 0.2, -0.3];
        let f0 = shifted_maxwellian(&p, a, gh_axes(&p, 40));
        let s = |t: f64| relative_entropy(&propagate(&f0, t, &p.u0, p.temperature()).unwrap(), &p).unwrap();
        let (s1, s2) = (s(2.0), s(3.0));
        let rate = (s1 / s2).ln();
        assert!((rate - 2.0).abs() < 1e-6, "{rate}");
        let exact = -norm2(&a) * (-4.0f64).exp() / (2.0 * p.temperature());
        assert!((s1 - exact).abs() < 1e-9 * exact.abs());
    }

    fn single_mode(p: &SystemParams, m: Vec<usize>) -> SpectralExpansion {
        let mut map = BTreeMap::new();
        map.insert(MultiIndex::new(m).unwrap(), 0.25);
        SpectralExpansion::from_map(p, 1, 4, &map).unwrap()
    }

    #[test]
    fn residual_is_second_order_for_limit_and_finite_modes() {
        let p = params();
        let sd = p.temperature().sqrt();
        for (mode, gen) in [(SeriesMode::Limit, Generator::Limit), (SeriesMode::FiniteN, Generator::FiniteN(8))] {
            for m in [vec![1, 0, 0], vec![0, 1, 1], vec![2, 0, 0]] {
                let s = SeriesEvaluator::new(&single_mode(&p, m.clone()), mode).unwrap();
                let res = |h: f64| {
                    let (f, df) = s.on_grid(0.2, regular_axes(&p, 1.6 * sd, h));
                    generator_residual(&f, &df, gen, &p).unwrap()
                };
                let (r1, r2) = (res(0.1 * sd), res(0.05 * sd));
                let order = (r1 / r2).log2();
                assert!((order - 2.0).abs() < 0.3, "{mode:?} {m:?}: {r1} {r2}");
            }
        }
    }

    #[test]
    fn residual_rejects_coarse_grids() {
        let p = params();
        let sd = p.temperature().sqrt();
        let s = SeriesEvaluator::new(&single_mode(&p, vec![1, 0, 0]), SeriesMode::Limit).unwrap();
        let (f, df) = s.on_grid(0.0, regular_axes(&p, 1.0 * sd, 0.2 * sd));
        assert!(matches!(
            generator_residual(&f, &df, Generator::Limit, &p),
            Err(Error::GridTooCoarse { .. })
        ));
    }

    #[test]
    fn limit_mode_residual_under_finite_generator_shrinks_with_n() {
        let p = params();
        let sd = p.temperature().sqrt();
        let s = SeriesEvaluator::new(&single_mode(&p, vec![0, 2, 0]), SeriesMode::Limit).unwrap();
        let (f, df) = s.on_grid(0.1, regular_axes(&p, 1.6 * sd, 0.05 * sd));
        let r8 = generator_residual(&f, &df, Generator::FiniteN(8), &p).unwrap();
        let r64 = generator_residual(&f, &df, Generator::FiniteN(64), &p).unwrap();
        assert!(r64 < 0.25 * r8, "{r8} {r64}");
    }

    #[test]
    fn product_states_propagate_as_products() {
        let p = params();
        let k = 10;
        let one = shifted_maxwellian(&p, [0.4, -0.2, 0.1], gh_axes(&p, k));
        let axes6: Vec<Axis> = one.axes.iter().chain(one.axes.iter()).cloned().collect();
        let prod = |g: &DensityGrid| {
            let n1 = g.len();
            let mut v = Vec::with_capacity(n1 * n1);
            for a in &g.values {
                for b in &g.values {
                    v.push(a * b);
                }
            }
            DensityGrid::zeros(2, axes6.clone()).with_values(v)
        };
        let f2 = propagate(&prod(&one), 0.6, &p.u0, p.temperature()).unwrap();
        let f1 = propagate(&one, 0.6, &p.u0, p.temperature()).unwrap();
        assert!(f2.l1_distance(&prod(&f1)).unwrap() < 1e-6);
    }

    #[test]
    fn kinetic_and_master_time_agree_with_limit_series() {
        let p = params();
        let f0 = shifted_maxwellian(&p, [0.3, -0.2, 0.2], gh_axes(&p, 24));
        let e = SpectralExpansion::from_limit_density(&f0, &p, 1, 14).unwrap();
        let s = SeriesEvaluator::new(&e, SeriesMode::Limit).unwrap();
        let tau = 0.4;
        let a = propagate_master(&f0, tau, &p).unwrap();
        let t = TimeScale::from_master(tau, p.eps0).t();
        let b = propagate(&f0, t, &p.u0, p.temperature()).unwrap();
        assert_eq!(a, b);
        let mut block = [[0.0; 3]];
        let series = DensityGrid::from_fn(1, f0.axes.clone(), |x| {
            block[0] = [x[0], x[1], x[2]];
            s.eval(tau, &block)
        });
        assert!(a.l1_distance(&series).unwrap() < 1e-8);
    }
}
