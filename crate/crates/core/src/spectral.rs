//! Spectrum of the sphere heat equation, the Legendre-chain basis restricted
//! to `n`-velocity marginals, and series solutions at finite `N` and in the
//! limit.
//!
//! A multi-index `m = (m_1..m_{3n})` with `sum m = j` fixes the descending
//! chain `k_0 = j`, `k_a = j - m_1 - ... - m_a`, `k_{3n} = 0`. At finite `N`
//! the marginal mode is
//!
//! ```text
//! g(v) = c^{-1} prod_a P_{k_{a-1}}^{k_a}(y_a / rho_a; 3N-2-a) * U(y) * J
//! ```
//!
//! with `y` the first `3n` rotated coordinates, `rho_a^2 = R^2 - sum_{b<a} y_b^2`,
//! `U` the uniform marginal density of the sphere, `J` the Jacobian of
//! `v -> y`, and `c = prod_a k_{a-1}!/m_a!`. In the limit it becomes
//! `2^{-j/2} prod M(v_i) prod H_{m_a}(sqrt(3/(4 eps0)) (v - u0)_a)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{marginal_jacobian, marginal_w_block, rotate_to_w, sample_uniform};
use crate::grid::{Axis, DensityGrid};
use crate::model::{norm2, SystemParams, Vec3, VelocityState};
use crate::quadrature::{gauss_hermite_scaled, gauss_legendre};
use crate::rng::stream;
use crate::specfun::{factorial, hermite, ln_factorial, ln_gamma_ratio_inv, AssocLegendre};

/// `j (j + 3N - 5) / (2 N eps0)`.
pub fn eigenvalue(j: usize, n_particles: usize, eps0: f64) -> f64 {
    let jf = j as f64;
    jf * (jf + 3.0 * n_particles as f64 - 5.0) / (2.0 * n_particles as f64 * eps0)
}

/// `3 j / (2 eps0)`.
pub fn limit_eigenvalue(j: usize, eps0: f64) -> f64 {
    1.5 * j as f64 / eps0
}

/// Dimension of the degree-`j` eigenspace on the `(3N-4)`-sphere:
/// `(3N-5+2j) (3N-6+j)! / (j! (3N-5)!)`.
pub fn degeneracy(j: usize, n_particles: usize) -> BigUint {
    assert!(n_particles >= 2);
    if j == 0 {
        return BigUint::from(1u32);
    }
    let b = 3 * n_particles - 5;
    // (b+j-1)! / (j! (b-1)!) * (b + 2j) / b, all exact
    let mut num = BigUint::from(1u32);
    let mut den = BigUint::from(1u32);
    for i in 1..=j {
        num *= BigUint::from(b - 1 + i);
        den *= BigUint::from(i);
    }
    num *= BigUint::from(b + 2 * j);
    den *= BigUint::from(b);
    num / den
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex {
    pub m: Vec<usize>,
}

impl MultiIndex {
    pub fn new(m: Vec<usize>) -> Result<Self> {
        if m.is_empty() || m.len() % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "multi-index length {} is not a positive multiple of 3",
                m.len()
            )));
        }
        Ok(MultiIndex { m })
    }

    pub fn zero(n: usize) -> Self {
        MultiIndex { m: vec![0; 3 * n] }
    }

    pub fn degree(&self) -> usize {
        self.m.iter().sum()
    }

    /// Number of velocities the index addresses.
    pub fn order(&self) -> usize {
        self.m.len() / 3
    }

    pub fn is_zero(&self) -> bool {
        self.m.iter().all(|&x| x == 0)
    }

    /// `k_0 = j, k_1, ..., k_{3n} = 0`.
    pub fn chain(&self) -> Vec<usize> {
        let mut k = Vec::with_capacity(self.m.len() + 1);
        let mut rest = self.degree();
        k.push(rest);
        for &ma in &self.m {
            rest -= ma;
            k.push(rest);
        }
        k
    }

    /// `prod_a m_a!`.
    pub fn factorial_product(&self) -> f64 {
        self.m.iter().map(|&x| factorial(x)).product()
    }

    /// Drops the last velocity's three components.
    pub fn truncate(&self) -> Option<(MultiIndex, [usize; 3])> {
        if self.m.len() < 6 {
            return None;
        }
        let cut = self.m.len() - 3;
        let tail = [self.m[cut], self.m[cut + 1], self.m[cut + 2]];
        Some((
            MultiIndex {
                m: self.m[..cut].to_vec(),
            },
            tail,
        ))
    }
}

/// All compositions of `j` into `3n` parts, descending lexicographic.
pub fn multi_index_set(j: usize, n: usize) -> Vec<MultiIndex> {
    fn rec(rest: usize, slots: usize, cur: &mut Vec<usize>, out: &mut Vec<MultiIndex>) {
        if slots == 1 {
            cur.push(rest);
            out.push(MultiIndex { m: cur.clone() });
            cur.pop();
            return;
        }
        for first in (0..=rest).rev() {
            cur.push(first);
            rec(rest - first, slots - 1, cur, out);
            cur.pop();
        }
    }
    assert!(n >= 1);
    let mut out = Vec::new();
    rec(j, 3 * n, &mut Vec::with_capacity(3 * n), &mut out);
    out
}

/// Degree-`j` indices of the 2-sphere basis (the `N = 2` case): `m_3 <= 1`.
pub fn sphere2_index_set(j: usize) -> Vec<MultiIndex> {
    multi_index_set(j, 1)
        .into_iter()
        .filter(|i| i.m[2] <= 1)
        .collect()
}

/// Indices used by an expansion of order `n` at the given parameters.
pub fn expansion_index_set(j: usize, n: usize, params: &SystemParams, mode: SeriesMode) -> Vec<MultiIndex> {
    if mode == SeriesMode::FiniteN && params.n_particles == 2 {
        sphere2_index_set(j)
    } else {
        multi_index_set(j, n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesMode {
    FiniteN,
    Limit,
}

fn ln_c_idx(idx: &MultiIndex) -> f64 {
    let k = idx.chain();
    idx.m
        .iter()
        .enumerate()
        .map(|(a, &ma)| ln_factorial(k[a]) - ln_factorial(ma))
        .sum()
}

/// Finite-`N` marginal mode of order `n`, `N >= n + 2`.
#[derive(Debug, Clone)]
pub struct FiniteNMode {
    idx: MultiIndex,
    params: SystemParams,
    factors: Vec<AssocLegendre>,
    inv_c: f64,
    ln_norm: f64,
    exponent: f64,
    jacobian: f64,
}

impl FiniteNMode {
    pub fn new(idx: &MultiIndex, params: &SystemParams) -> Result<Self> {
        let n = idx.order();
        let big_n = params.n_particles;
        if big_n < n + 2 {
            return Err(Error::InvalidArgument(format!(
                "finite-N marginal of order {n} needs N >= {}, got {big_n}",
                n + 2
            )));
        }
        let k = idx.chain();
        let factors = (0..3 * n)
            .map(|a| AssocLegendre::new(k[a], k[a + 1], 3 * big_n - 3 - a))
            .collect::<Result<Vec<_>>>()?;
        let d = (3 * big_n - 3) as f64;
        let m = (3 * n) as f64;
        let r2 = params.radius_squared();
        let ln_norm = ln_gamma_ratio_inv(0.5 * (d - m), 0.5 * m) - 0.5 * m * (PI * r2).ln();
        Ok(FiniteNMode {
            idx: idx.clone(),
            params: *params,
            factors,
            inv_c: (-ln_c_idx(idx)).exp(),
            ln_norm,
            exponent: 0.5 * (d - m - 2.0),
            jacobian: marginal_jacobian(n, big_n),
        })
    }

    pub fn index(&self) -> &MultiIndex {
        &self.idx
    }

    /// Chain product at the leading `3n` rotated coordinates `y`, scaled by
    /// `1/c`. Zero outside the ball of radius `R`.
    pub fn harmonic(&self, y: &[f64]) -> f64 {
        let mut rho2 = self.params.radius_squared();
        let mut out = self.inv_c;
        for (a, f) in self.factors.iter().enumerate() {
            if rho2 <= 0.0 {
                return 0.0;
            }
            let t = (y[a] / rho2.sqrt()).clamp(-1.0, 1.0);
            out *= f.eval(t);
            rho2 -= y[a] * y[a];
        }
        out
    }

    /// Uniform marginal density of `y` on the sphere.
    pub fn uniform_density(&self, y: &[f64]) -> f64 {
        let s = 1.0 - y.iter().map(|x| x * x).sum::<f64>() / self.params.radius_squared();
        if s <= 0.0 {
            return 0.0;
        }
        (self.ln_norm + self.exponent * s.ln()).exp()
    }

    /// Mode value as a density in `v_1..v_n`.
    pub fn eval(&self, v_block: &[Vec3]) -> f64 {
        let y = flatten(&marginal_w_block(v_block, &self.params));
        let u = self.uniform_density(&y);
        if u == 0.0 {
            return 0.0;
        }
        self.harmonic(&y) * u * self.jacobian
    }

    /// Mean of the squared chain product over the uniform sphere.
    pub fn mean_square(&self) -> f64 {
        self.factors.iter().map(AssocLegendre::mean_square).product::<f64>()
            * self.inv_c
            * self.inv_c
    }
}

/// Exact basis of the 2-sphere (the whole `N = 2` manifold). Values are
/// densities against the uniform probability on the sphere.
#[derive(Debug, Clone)]
pub struct Sphere2Mode {
    idx: MultiIndex,
    params: SystemParams,
    first: AssocLegendre,
    second: AssocLegendre,
}

impl Sphere2Mode {
    pub fn new(idx: &MultiIndex, params: &SystemParams) -> Result<Self> {
        if params.n_particles != 2 || idx.m.len() != 3 || idx.m[2] > 1 {
            return Err(Error::InvalidArgument(format!(
                "not a 2-sphere index at N={}: {:?}",
                params.n_particles, idx.m
            )));
        }
        let k = idx.chain();
        Ok(Sphere2Mode {
            idx: idx.clone(),
            params: *params,
            first: AssocLegendre::new(k[0], k[1], 3)?,
            second: AssocLegendre::new(k[1], k[2], 2)?,
        })
    }

    /// Harmonic at the direction of `y` (any nonzero 3-vector).
    pub fn harmonic(&self, y: &[f64]) -> f64 {
        let r = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]).sqrt();
        if r == 0.0 {
            return 0.0;
        }
        let t1 = (y[0] / r).clamp(-1.0, 1.0);
        let rho = (y[1] * y[1] + y[2] * y[2]).sqrt();
        let t2 = if rho == 0.0 { 1.0 } else { y[1] / rho };
        let sign = if self.idx.m[2] == 1 {
            if y[2] < 0.0 {
                -1.0
            } else {
                1.0
            }
        } else {
            1.0
        };
        self.first.eval(t1) * self.second.eval(t2) * sign
    }

    pub fn eval(&self, v_block: &[Vec3]) -> f64 {
        self.harmonic(&marginal_w_block(&v_block[..1], &self.params)[0])
    }

    pub fn mean_square(&self) -> f64 {
        self.first.mean_square() * self.second.mean_square()
    }
}

/// `(3/(4 pi eps0))^{3/2} exp(-3|v-u0|^2/(4 eps0))`.
pub fn maxwellian_density(v: &Vec3, params: &SystemParams) -> f64 {
    let d = [v[0] - params.u0[0], v[1] - params.u0[1], v[2] - params.u0[2]];
    (0.75 / (PI * params.eps0)).powf(1.5) * (-0.75 * norm2(&d) / params.eps0).exp()
}

/// Limit marginal mode.
#[derive(Debug, Clone)]
pub struct LimitMode {
    idx: MultiIndex,
    params: SystemParams,
    scale: f64,
    pref: f64,
}

impl LimitMode {
    pub fn new(idx: &MultiIndex, params: &SystemParams) -> Self {
        LimitMode {
            idx: idx.clone(),
            params: *params,
            scale: (0.75 / params.eps0).sqrt(),
            pref: 2f64.powf(-0.5 * idx.degree() as f64),
        }
    }

    /// `g / prod M`: the Hermite product alone.
    pub fn ratio(&self, v_block: &[Vec3]) -> f64 {
        let mut out = self.pref;
        for (i, v) in v_block.iter().enumerate() {
            for c in 0..3 {
                let ma = self.idx.m[3 * i + c];
                if ma > 0 {
                    out *= hermite(ma, self.scale * (v[c] - self.params.u0[c]));
                }
            }
        }
        out
    }

    pub fn eval(&self, v_block: &[Vec3]) -> f64 {
        let m: f64 = v_block
            .iter()
            .map(|v| maxwellian_density(v, &self.params))
            .product();
        m * self.ratio(v_block)
    }

    /// `<g, g>` under the weight `1 / prod M`.
    pub fn norm_squared(&self) -> f64 {
        self.idx.factorial_product()
    }
}

/// Any of the three mode families behind one evaluator.
#[derive(Debug, Clone)]
pub enum ModeFn {
    Sphere2(Sphere2Mode),
    Finite(FiniteNMode),
    Limit(LimitMode),
}

impl ModeFn {
    pub fn new(idx: &MultiIndex, params: &SystemParams, mode: SeriesMode) -> Result<Self> {
        Ok(match mode {
            SeriesMode::Limit => ModeFn::Limit(LimitMode::new(idx, params)),
            SeriesMode::FiniteN if params.n_particles == 2 => {
                ModeFn::Sphere2(Sphere2Mode::new(idx, params)?)
            }
            SeriesMode::FiniteN => ModeFn::Finite(FiniteNMode::new(idx, params)?),
        })
    }

    pub fn eval(&self, v_block: &[Vec3]) -> f64 {
        match self {
            ModeFn::Sphere2(m) => m.eval(v_block),
            ModeFn::Finite(m) => m.eval(v_block),
            ModeFn::Limit(m) => m.eval(v_block),
        }
    }
}

/// `marginal_eigenfunction_finiteN`.
pub fn marginal_eigenfunction_finite_n(
    idx: &MultiIndex,
    params: &SystemParams,
    v_block: &[Vec3],
) -> Result<f64> {
    check_block(idx, v_block)?;
    Ok(FiniteNMode::new(idx, params)?.eval(v_block))
}

/// `marginal_eigenfunction_limit`.
pub fn marginal_eigenfunction_limit(
    idx: &MultiIndex,
    params: &SystemParams,
    v_block: &[Vec3],
) -> Result<f64> {
    check_block(idx, v_block)?;
    Ok(LimitMode::new(idx, params).eval(v_block))
}

fn check_block(idx: &MultiIndex, v_block: &[Vec3]) -> Result<()> {
    if v_block.len() != idx.order() {
        return Err(Error::InvalidArgument(format!(
            "index addresses {} velocities, block has {}",
            idx.order(),
            v_block.len()
        )));
    }
    Ok(())
}

fn flatten(w: &[Vec3]) -> Vec<f64> {
    w.iter().flat_map(|x| x.iter().copied()).collect()
}

/// Initial data for a Fourier coefficient.
pub enum InitialData<'a> {
    /// Point mass at a micro-state.
    Dirac(&'a VelocityState),
    /// Empirical measure of given micro-states.
    Samples(&'a [VelocityState]),
    /// Density relative to the uniform probability on the manifold.
    Density(&'a (dyn Fn(&VelocityState) -> f64 + Sync)),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoefficientMethod {
    /// Product Gauss rule on the 2-sphere; `N = 2` only.
    Exact { nodes: usize },
    /// Uniform manifold samples with the given budget.
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub value: f64,
    pub stderr: f64,
}

/// Harmonic of a full-sphere mode, normalized so the marginal coefficient
/// follows by `<F0 G> / <G G>`.
struct FullHarmonic {
    mode: ModeFn,
    mean_square: f64,
}

impl FullHarmonic {
    fn new(idx: &MultiIndex, params: &SystemParams) -> Result<Self> {
        let mode = ModeFn::new(idx, params, SeriesMode::FiniteN)?;
        let mean_square = match &mode {
            ModeFn::Sphere2(m) => m.mean_square(),
            ModeFn::Finite(m) => m.mean_square(),
            ModeFn::Limit(_) => unreachable!(),
        };
        Ok(FullHarmonic { mode, mean_square })
    }

    fn at_state(&self, state: &VelocityState) -> f64 {
        let (w, _) = rotate_to_w(state);
        self.at_w(&flatten(&w.w))
    }

    fn at_w(&self, y: &[f64]) -> f64 {
        match &self.mode {
            ModeFn::Sphere2(m) => m.harmonic(y),
            ModeFn::Finite(m) => m.harmonic(y),
            ModeFn::Limit(_) => unreachable!(),
        }
    }
}

/// `F = <F0 | G> / <G | G>` for the finite-`N` mode `idx`.
pub fn fourier_coefficient(
    init: &InitialData<'_>,
    idx: &MultiIndex,
    params: &SystemParams,
    method: CoefficientMethod,
) -> Result<Coefficient> {
    if let CoefficientMethod::Exact { .. } = method {
        if params.n_particles != 2 {
            return Err(Error::InvalidArgument(
                "exact coefficients need N = 2; use Monte Carlo".into(),
            ));
        }
    }
    let h = FullHarmonic::new(idx, params)?;
    let ms = h.mean_square;
    match init {
        InitialData::Dirac(s) => Ok(Coefficient {
            value: h.at_state(s) / ms,
            stderr: 0.0,
        }),
        InitialData::Samples(states) => {
            if states.is_empty() {
                return Err(Error::InvalidArgument("no samples".into()));
            }
            let vals: Vec<f64> = states.iter().map(|s| h.at_state(s) / ms).collect();
            Ok(mean_and_stderr(&vals))
        }
        InitialData::Density(f) => match method {
            CoefficientMethod::Exact { nodes } => {
                let value = sphere2_average(params, nodes, |state, y| f(state) * h.at_w(y));
                Ok(Coefficient {
                    value: value / ms,
                    stderr: 0.0,
                })
            }
            CoefficientMethod::MonteCarlo { samples, seed } => {
                if samples < 2 {
                    return Err(Error::InvalidArgument("need at least 2 samples".into()));
                }
                let mut rng = stream(seed, 0);
                let vals: Vec<f64> = (0..samples)
                    .map(|_| {
                        let s = sample_uniform(params, &mut rng);
                        f(&s) * h.at_state(&s) / ms
                    })
                    .collect();
                Ok(mean_and_stderr(&vals))
            }
        },
    }
}

fn mean_and_stderr(vals: &[f64]) -> Coefficient {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return Coefficient {
            value: mean,
            stderr: 0.0,
        };
    }
    let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Coefficient {
        value: mean,
        stderr: (var / n).sqrt(),
    }
}

/// Uniform average over the `N = 2` manifold with a Gauss-Legendre rule in
/// `cos theta` and a trapezoid rule in `phi` (exact for harmonics of degree
/// below `nodes`).
pub fn sphere2_average<F: FnMut(&VelocityState, &[f64]) -> f64>(
    params: &SystemParams,
    nodes: usize,
    mut f: F,
) -> f64 {
    let r = params.radius();
    let (t, wt) = gauss_legendre(nodes);
    let n_phi = 2 * nodes + 1;
    let sq2 = std::f64::consts::SQRT_2;
    let mut acc = 0.0;
    for (ti, wi) in t.iter().zip(&wt) {
        let s = (1.0 - ti * ti).max(0.0).sqrt();
        for p in 0..n_phi {
            let phi = 2.0 * PI * p as f64 / n_phi as f64;
            let y = [r * ti, r * s * phi.cos(), r * s * phi.sin()];
            let state = state_from_sphere2(params, &y, sq2);
            acc += 0.5 * wi / n_phi as f64 * f(&state, &y);
        }
    }
    acc
}

fn state_from_sphere2(params: &SystemParams, y: &[f64], sq2: f64) -> VelocityState {
    let u = params.u0;
    let v1 = [u[0] + y[0] / sq2, u[1] + y[1] / sq2, u[2] + y[2] / sq2];
    let v2 = [u[0] - y[0] / sq2, u[1] - y[1] / sq2, u[2] - y[2] / sq2];
    VelocityState {
        v: vec![v1, v2],
        params: *params,
    }
}

/// Limit-mode coefficient `int f0 (g/M) / prod m!` by grid quadrature.
pub fn limit_coefficient(f0: &DensityGrid, idx: &MultiIndex, params: &SystemParams) -> Result<f64> {
    let n = idx.order();
    if f0.dim() != 3 * n {
        return Err(Error::InvalidArgument(format!(
            "grid has {} axes, index needs {}",
            f0.dim(),
            3 * n
        )));
    }
    let mode = LimitMode::new(idx, params);
    let mut block = vec![[0.0; 3]; n];
    let val = f0.integrate_with(|x| {
        unflatten_into(x, &mut block);
        mode.ratio(&block)
    });
    Ok(val / mode.norm_squared())
}

pub(crate) fn unflatten_into(x: &[f64], block: &mut [Vec3]) {
    for (i, b) in block.iter_mut().enumerate() {
        b.copy_from_slice(&x[3 * i..3 * i + 3]);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionEntry {
    pub m: Vec<usize>,
    pub coeff: f64,
}

/// Truncated coefficients of an order-`n` marginal expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralExpansion {
    pub params: SystemParams,
    pub n: usize,
    #[serde(rename = "J")]
    pub truncation: usize,
    pub entries: Vec<ExpansionEntry>,
}

impl SpectralExpansion {
    /// Expansion holding only the ground mode.
    pub fn ground(params: &SystemParams, n: usize, truncation: usize) -> Self {
        SpectralExpansion {
            params: *params,
            n,
            truncation,
            entries: vec![ExpansionEntry {
                m: vec![0; 3 * n],
                coeff: 1.0,
            }],
        }
    }

    pub fn from_map(
        params: &SystemParams,
        n: usize,
        truncation: usize,
        coeffs: &BTreeMap<MultiIndex, f64>,
    ) -> Result<Self> {
        let mut out = Self::ground(params, n, truncation);
        for (idx, &c) in coeffs {
            if idx.order() != n {
                return Err(Error::InvalidArgument(format!("index {:?} is not of order {n}", idx.m)));
            }
            if idx.degree() > truncation {
                return Err(Error::InvalidArgument(format!(
                    "index {:?} exceeds truncation {truncation}",
                    idx.m
                )));
            }
            if idx.is_zero() {
                if (c - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "ground coefficient must be 1, got {c}"
                    )));
                }
                continue;
            }
            out.entries.push(ExpansionEntry {
                m: idx.m.clone(),
                coeff: c,
            });
        }
        Ok(out)
    }

    /// Finite-`N` expansion of manifold initial data, modes up to degree `J`.
    pub fn from_initial(
        init: &InitialData<'_>,
        params: &SystemParams,
        n: usize,
        truncation: usize,
        method: CoefficientMethod,
    ) -> Result<Self> {
        let mut out = Self::ground(params, n, truncation);
        for j in 1..=truncation {
            for idx in expansion_index_set(j, n, params, SeriesMode::FiniteN) {
                let c = fourier_coefficient(init, &idx, params, method)?;
                out.entries.push(ExpansionEntry {
                    m: idx.m,
                    coeff: c.value,
                });
            }
        }
        Ok(out)
    }

    /// Limit expansion of a sampled order-`n` density.
    pub fn from_limit_density(
        f0: &DensityGrid,
        params: &SystemParams,
        n: usize,
        truncation: usize,
    ) -> Result<Self> {
        let mut out = Self::ground(params, n, truncation);
        for j in 1..=truncation {
            for idx in multi_index_set(j, n) {
                let c = limit_coefficient(f0, &idx, params)?;
                out.entries.push(ExpansionEntry { m: idx.m, coeff: c });
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let e: SpectralExpansion = serde_json::from_str(text)?;
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ground = None;
        for e in &self.entries {
            if e.m.len() != 3 * self.n {
                return Err(Error::InvalidArgument(format!("entry {:?} has wrong length", e.m)));
            }
            if e.m.iter().sum::<usize>() > self.truncation {
                return Err(Error::InvalidArgument(format!("entry {:?} exceeds J", e.m)));
            }
            if e.m.iter().all(|&x| x == 0) {
                ground = Some(e.coeff);
            }
        }
        match ground {
            Some(c) if (c - 1.0).abs() <= 1e-12 => Ok(()),
            _ => Err(Error::InvalidArgument("ground coefficient must be 1".into())),
        }
    }
}

/// Prepared series `sum F g e^{-lambda tau}`.
#[derive(Debug, Clone)]
pub struct SeriesEvaluator {
    terms: Vec<(f64, f64, ModeFn)>,
    n: usize,
}

impl SeriesEvaluator {
    pub fn new(expansion: &SpectralExpansion, mode: SeriesMode) -> Result<Self> {
        let p = &expansion.params;
        let mut terms = Vec::with_capacity(expansion.entries.len());
        for e in &expansion.entries {
            if e.coeff == 0.0 {
                continue;
            }
            let idx = MultiIndex::new(e.m.clone())?;
            let j = idx.degree();
            let lambda = match mode {
                SeriesMode::FiniteN => eigenvalue(j, p.n_particles, p.eps0),
                SeriesMode::Limit => limit_eigenvalue(j, p.eps0),
            };
            terms.push((e.coeff, lambda, ModeFn::new(&idx, p, mode)?));
        }
        Ok(SeriesEvaluator {
            terms,
            n: expansion.n,
        })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn eval(&self, tau: f64, v_block: &[Vec3]) -> f64 {
        self.terms
            .iter()
            .map(|(c, l, g)| c * (-l * tau).exp() * g.eval(v_block))
            .sum()
    }

    /// `d/dtau` of [`Self::eval`].
    pub fn eval_dtau(&self, tau: f64, v_block: &[Vec3]) -> f64 {
        self.terms
            .iter()
            .map(|(c, l, g)| -l * c * (-l * tau).exp() * g.eval(v_block))
            .sum()
    }

    /// Series and its time derivative sampled on a grid with `3n` axes.
    pub fn on_grid(&self, tau: f64, axes: Vec<Axis>) -> (DensityGrid, DensityGrid) {
        let mut block = vec![[0.0; 3]; self.n];
        let f = DensityGrid::from_fn(self.n, axes.clone(), |x| {
            unflatten_into(x, &mut block);
            self.eval(tau, &block)
        });
        let df = DensityGrid::from_fn(self.n, axes, |x| {
            unflatten_into(x, &mut block);
            self.eval_dtau(tau, &block)
        });
        (f, df)
    }
}

/// One-shot series evaluation; prefer [`SeriesEvaluator`] in loops.
pub fn evolve_marginal_series(
    expansion: &SpectralExpansion,
    tau: f64,
    mode: SeriesMode,
    v_block: &[Vec3],
) -> Result<f64> {
    if v_block.len() != expansion.n {
        return Err(Error::InvalidArgument(format!(
            "expansion of order {} evaluated at {} velocities",
            expansion.n,
            v_block.len()
        )));
    }
    Ok(SeriesEvaluator::new(expansion, mode)?.eval(tau, v_block))
}

/// Integrates the limit mode `idx` (order `n + 1`) over its last velocity with
/// a 40-node Gauss-Hermite rule per axis and compares with the order-`n`
/// mode: equal when the last three indices vanish, zero otherwise. Returns
/// the largest absolute defect over a fixed set of test points.
pub fn marginal_consistency_check(idx: &MultiIndex, params: &SystemParams) -> Result<f64> {
    let (head, tail) = idx
        .truncate()
        .ok_or_else(|| Error::InvalidArgument("index must address at least 2 velocities".into()))?;
    let n = head.order();
    let full = LimitMode::new(idx, params);
    let part = LimitMode::new(&head, params);
    let var = params.temperature();
    let ax: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
        .map(|c| gauss_hermite_scaled(40, params.u0[c], var))
        .collect();
    let sd = var.sqrt();
    // fixed, asymmetric test points within about two standard deviations
    let offsets = [-1.7, -0.9, -0.2, 0.0, 0.35, 1.1, 1.9];
    let mut worst: f64 = 0.0;
    for (p, &o) in offsets.iter().enumerate() {
        let mut block = vec![[0.0; 3]; n + 1];
        for i in 0..n {
            for c in 0..3 {
                let shift = offsets[(p + 2 * i + 3 * c) % offsets.len()];
                block[i][c] = params.u0[c] + sd * (0.6 * o + 0.5 * shift);
            }
        }
        let mut integral = 0.0;
        for (x0, w0) in ax[0].0.iter().zip(&ax[0].1) {
            for (x1, w1) in ax[1].0.iter().zip(&ax[1].1) {
                for (x2, w2) in ax[2].0.iter().zip(&ax[2].1) {
                    block[n] = [*x0, *x1, *x2];
                    integral += w0 * w1 * w2 * full.eval(&block);
                }
            }
        }
        let expect = if tail == [0, 0, 0] {
            part.eval(&block[..n])
        } else {
            0.0
        };
        worst = worst.max((integral - expect).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::derive_params;

    fn params(n: usize) -> SystemParams {
        derive_params([0.2, -0.1, 0.3], 1.0 + 0.5 * (0.04 + 0.01 + 0.09), n).unwrap()
    }

    #[test]
    fn spectrum_examples() {
        assert_eq!(eigenvalue(0, 7, 1.3), 0.0);
        assert_eq!(eigenvalue(1, 2, 1.0), 0.5);
        assert_eq!(limit_eigenvalue(2, 1.0), 3.0);
        assert_eq!(degeneracy(0, 9), BigUint::from(1u32));
        assert_eq!(degeneracy(1, 2), BigUint::from(3u32));
        assert_eq!(degeneracy(2, 2), BigUint::from(5u32));
        // N=3: 6-dim space, harmonics of degree 2 in 6 variables: 21 - 1 = 20
        assert_eq!(degeneracy(2, 3), BigUint::from(20u32));
    }

    #[test]
    fn gap_increases_to_limit() {
        let mut prev = 0.0;
        for e in 1..=6 {
            let n = 10usize.pow(e);
            let l = eigenvalue(1, n, 1.0);
            assert!(l > prev && l < 1.5);
            prev = l;
        }
        assert!((prev - 1.5).abs() < 1e-5);
    }

    #[test]
    fn index_sets() {
        assert_eq!(multi_index_set(0, 2), vec![MultiIndex::zero(2)]);
        let s: Vec<Vec<usize>> = multi_index_set(1, 1).into_iter().map(|i| i.m).collect();
        assert_eq!(s, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        for n in 1..=3 {
            for j in 0..=6 {
                let set = multi_index_set(j, n);
                let parts = 3 * n;
                let binom = (1..parts).fold(1u64, |acc, i| acc * (j + i) as u64 / i as u64);
                assert_eq!(set.len() as u64, binom);
                assert!(set.windows(2).all(|w| w[0] > w[1]));
                assert!(set.iter().all(|i| i.degree() == j));
            }
        }
        for j in 0..8 {
            assert_eq!(sphere2_index_set(j).len(), 2 * j + 1);
        }
        let idx = MultiIndex::new(vec![1, 0, 2, 0, 1, 0]).unwrap();
        assert_eq!(idx.chain(), vec![4, 3, 3, 1, 1, 0, 0]);
    }

    #[test]
    fn sphere2_basis_is_orthogonal() {
        let p = params(2);
        let modes: Vec<Sphere2Mode> = (0..=4)
            .flat_map(sphere2_index_set)
            .map(|i| Sphere2Mode::new(&i, &p).unwrap())
            .collect();
        for a in &modes {
            for b in &modes {
                let ip = sphere2_average(&p, 12, |_, y| a.harmonic(y) * b.harmonic(y));
                if a.idx == b.idx {
                    assert!((ip - a.mean_square()).abs() < 1e-10 * a.mean_square());
                } else {
                    assert!(ip.abs() < 1e-10, "{:?} {:?}: {ip}", a.idx.m, b.idx.m);
                }
            }
        }
    }

    /// Quadrature over the support ball of an order-1 finite-N marginal in
    /// spherical coordinates around `u0`.
    fn ball_integral<F: Fn(&Vec3) -> f64>(p: &SystemParams, f: F) -> f64 {
        let nf = p.n_particles as f64;
        let rmax = (p.radius_squared() * (nf - 1.0) / nf).sqrt();
        let (r, wr) = gauss_legendre(40);
        let (c, wc) = gauss_legendre(24);
        let nphi = 48;
        let mut acc = 0.0;
        for (ri, wri) in r.iter().zip(&wr) {
            let rr = 0.5 * rmax * (ri + 1.0);
            for (ci, wci) in c.iter().zip(&wc) {
                let s = (1.0 - ci * ci).sqrt();
                for k in 0..nphi {
                    let phi = 2.0 * PI * k as f64 / nphi as f64;
                    let v = [
                        p.u0[0] + rr * s * phi.cos(),
                        p.u0[1] + rr * s * phi.sin(),
                        p.u0[2] + rr * ci,
                    ];
                    acc += 0.5 * rmax * wri * wci * (2.0 * PI / nphi as f64) * rr * rr * f(&v);
                }
            }
        }
        acc
    }

    #[test]
    fn finite_n_marginal_mass_and_orthogonality() {
        let p = params(8);
        let g0 = FiniteNMode::new(&MultiIndex::zero(1), &p).unwrap();
        let mass = ball_integral(&p, |v| g0.eval(&[*v]));
        assert!((mass - 1.0).abs() < 1e-10, "mass {mass}");
        for idx in multi_index_set(1, 1).into_iter().chain(multi_index_set(2, 1)) {
            let g = FiniteNMode::new(&idx, &p).unwrap();
            let ip = ball_integral(&p, |v| g.eval(&[*v]));
            assert!(ip.abs() < 1e-8, "{:?}: {ip}", idx.m);
        }
    }

    #[test]
    fn finite_n_boundary_and_peak() {
        let p = params(6);
        let g = FiniteNMode::new(&MultiIndex::new(vec![1, 0, 1]).unwrap(), &p).unwrap();
        let rmax = (p.radius_squared() * 5.0 / 6.0).sqrt();
        let edge = [p.u0[0] + rmax, p.u0[1], p.u0[2]];
        assert_eq!(g.eval(&[edge]), 0.0);
        let outside = [p.u0[0] + 1.01 * rmax, p.u0[1], p.u0[2]];
        assert_eq!(g.eval(&[outside]), 0.0);

        let big = params(10_000);
        let g0 = FiniteNMode::new(&MultiIndex::zero(1), &big).unwrap();
        let peak = (0.75 / (PI * big.eps0)).powf(1.5);
        assert!((g0.eval(&[big.u0]) / peak - 1.0).abs() < 1e-3);
        assert!(FiniteNMode::new(&MultiIndex::zero(2), &params(3)).is_err());
    }

    #[test]
    fn finite_n_converges_to_limit() {
        let v = [[0.9, -0.6, 0.1]];
        for j in 0..=3 {
            for idx in multi_index_set(j, 1) {
                let mut errs = Vec::new();
                for n in [100usize, 1000, 10_000] {
                    let p = params(n);
                    let a = FiniteNMode::new(&idx, &p).unwrap().eval(&v);
                    let b = LimitMode::new(&idx, &p).eval(&v);
                    errs.push((a - b).abs());
                }
                assert!(errs[2] < errs[1] && errs[1] < errs[0], "{:?}: {errs:?}", idx.m);
                // at least as fast as 1/sqrt(N)
                assert!(errs[0] / errs[2] > 9.0, "{:?}: {errs:?}", idx.m);
            }
        }
    }

    #[test]
    fn limit_modes_orthogonal_under_inverse_maxwellian() {
        let p = params(4);
        let (x, w): (Vec<Vec<f64>>, Vec<Vec<f64>>) = (0..3)
            .map(|c| gauss_hermite_scaled(20, p.u0[c], p.temperature()))
            .unzip();
        let idxs: Vec<MultiIndex> = (0..=3).flat_map(|j| multi_index_set(j, 1)).collect();
        let modes: Vec<LimitMode> = idxs.iter().map(|i| LimitMode::new(i, &p)).collect();
        for (a, ma) in modes.iter().enumerate() {
            for mb in modes.iter().skip(a) {
                let mut ip = 0.0;
                for i in 0..20 {
                    for k in 0..20 {
                        for l in 0..20 {
                            let v = [[x[0][i], x[1][k], x[2][l]]];
                            let m = maxwellian_density(&v[0], &p);
                            ip += w[0][i] * w[1][k] * w[2][l] * ma.eval(&v) * mb.eval(&v) / m;
                        }
                    }
                }
                let expect = if ma.idx == mb.idx { ma.norm_squared() } else { 0.0 };
                assert!((ip - expect).abs() < 1e-8, "{:?} {:?}: {ip}", ma.idx.m, mb.idx.m);
            }
        }
        assert_eq!(
            LimitMode::new(&MultiIndex::zero(1), &p).eval(&[[0.3, 0.1, -0.5]]),
            maxwellian_density(&[0.3, 0.1, -0.5], &p)
        );
    }

    #[test]
    fn dirac_coefficients_at_pole() {
        let p = params(2);
        let r = p.radius();
        let sq2 = std::f64::consts::SQRT_2;
        let pole = state_from_sphere2(&p, &[r, 0.0, 0.0], sq2);
        for j in 0..=5 {
            for idx in sphere2_index_set(j) {
                let c = fourier_coefficient(&InitialData::Dirac(&pole), &idx, &p, CoefficientMethod::Exact { nodes: 8 })
                    .unwrap();
                let m = Sphere2Mode::new(&idx, &p).unwrap();
                let expect = m.harmonic(&[1.0, 0.0, 0.0]) / m.mean_square();
                assert!((c.value - expect).abs() < 1e-12);
                if idx.m[0] != j {
                    assert_eq!(c.value, 0.0);
                } else {
                    // zonal Legendre: (2j+1) P_j(1)^2 scaling
                    let leg = AssocLegendre::new(j, 0, 3).unwrap();
                    let pj1 = leg.eval(1.0);
                    assert!((c.value * pj1 - (2 * j + 1) as f64).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn uniform_density_coefficients() {
        let p = params(2);
        let one = |_: &VelocityState| 1.0;
        for j in 0..=3 {
            for idx in sphere2_index_set(j) {
                let c = fourier_coefficient(&InitialData::Density(&one), &idx, &p, CoefficientMethod::Exact { nodes: 10 })
                    .unwrap();
                let expect = if j == 0 { 1.0 } else { 0.0 };
                assert!((c.value - expect).abs() < 1e-12);
            }
        }
        let p4 = params(4);
        assert!(fourier_coefficient(&InitialData::Density(&one), &MultiIndex::zero(1), &p4, CoefficientMethod::Exact { nodes: 4 })
            .is_err());
        for idx in multi_index_set(1, 1).into_iter().chain(multi_index_set(2, 1)) {
            let c = fourier_coefficient(
                &InitialData::Density(&one),
                &idx,
                &p4,
                CoefficientMethod::MonteCarlo { samples: 4000, seed: 11 },
            )
            .unwrap();
            assert!(c.value.is_finite() && c.stderr > 0.0);
            assert!(c.value.abs() < 3.5 * c.stderr, "{:?}: {c:?}", idx.m);
        }
    }

    #[test]
    fn sphere2_heat_kernel_is_normalized() {
        let p = params(2);
        let r = p.radius();
        let pole = state_from_sphere2(&p, &[r, 0.0, 0.0], std::f64::consts::SQRT_2);
        let e = SpectralExpansion::from_initial(
            &InitialData::Dirac(&pole),
            &p,
            1,
            12,
            CoefficientMethod::Exact { nodes: 8 },
        )
        .unwrap();
        let s = SeriesEvaluator::new(&e, SeriesMode::FiniteN).unwrap();
        for tau in [0.3, 1.0] {
            let mass = sphere2_average(&p, 16, |st, _| s.eval(tau, &st.v[..1]));
            assert!((mass - 1.0).abs() < 1e-12);
        }
        let late = s.eval(200.0, &[[0.0, 1.0, 0.0]]);
        assert!((late - 1.0).abs() < 1e-12);
    }

    fn admissible_limit_expansion(p: &SystemParams, n: usize) -> SpectralExpansion {
        let mut map = BTreeMap::new();
        for j in 2..=3 {
            for (k, idx) in multi_index_set(j, n).into_iter().enumerate() {
                let mut c = 0.05 * (((k * 7 + j) % 5) as f64 - 2.0);
                // degree 2: keep each velocity's H_2 trace free
                if j == 2 && idx.m.iter().any(|&x| x == 2) {
                    let at = idx.m.iter().position(|&x| x == 2).unwrap();
                    c = match at % 3 {
                        0 => 0.04,
                        1 => -0.01,
                        _ => -0.03,
                    };
                }
                map.insert(idx, c);
            }
        }
        SpectralExpansion::from_map(p, n, 3, &map).unwrap()
    }

    #[test]
    fn limit_series_conserves_moments() {
        let p = params(5);
        let e = admissible_limit_expansion(&p, 1);
        let s = SeriesEvaluator::new(&e, SeriesMode::Limit).unwrap();
        let ax: Vec<Axis> = (0..3)
            .map(|c| Axis::gauss_hermite(30, p.u0[c], p.temperature()))
            .collect();
        for tau in [0.0, 0.2, 1.5] {
            let (g, _) = s.on_grid(tau, ax.clone());
            let m = g.mass();
            let mom: Vec<f64> = (0..3).map(|c| g.integrate_with(|x| x[c])).collect();
            let en = g.integrate_with(|x| 0.5 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]));
            assert!((m - 1.0).abs() < 1e-8);
            for c in 0..3 {
                assert!((mom[c] - p.u0[c]).abs() < 1e-8);
            }
            assert!((en - p.e0).abs() < 1e-8, "tau {tau}: {en} vs {}", p.e0);
        }
    }

    #[test]
    fn series_time_limits_and_decay() {
        let p = params(7);
        let e = admissible_limit_expansion(&p, 1);
        let v = [[0.4, -0.2, 0.9]];
        for mode in [SeriesMode::Limit, SeriesMode::FiniteN] {
            let s = SeriesEvaluator::new(&e, mode).unwrap();
            let g0 = ModeFn::new(&MultiIndex::zero(1), &p, mode).unwrap().eval(&v);
            assert!((s.eval(1e3, &v) - g0).abs() < 1e-14);
            let direct: f64 = e
                .entries
                .iter()
                .map(|en| en.coeff * ModeFn::new(&MultiIndex { m: en.m.clone() }, &p, mode).unwrap().eval(&v))
                .sum();
            assert!((s.eval(0.0, &v) - direct).abs() < 1e-14);
        }
        // single mode: log deviation is linear with slope -lambda
        let idx = MultiIndex::new(vec![0, 2, 0]).unwrap();
        let mut map = BTreeMap::new();
        map.insert(idx.clone(), 0.3);
        let single = SpectralExpansion::from_map(&p, 1, 2, &map).unwrap();
        for (mode, lambda) in [
            (SeriesMode::Limit, limit_eigenvalue(2, p.eps0)),
            (SeriesMode::FiniteN, eigenvalue(2, 7, p.eps0)),
        ] {
            let s = SeriesEvaluator::new(&single, mode).unwrap();
            let g0 = ModeFn::new(&MultiIndex::zero(1), &p, mode).unwrap().eval(&v);
            let d = |t: f64| (s.eval(t, &v) - g0).abs().ln();
            let slope = (d(2.0) - d(0.5)) / 1.5;
            assert!((slope + lambda).abs() < 1e-6, "{slope} vs {lambda}");
        }
    }

    #[test]
    fn consistency_check_examples() {
        let p = params(3);
        for j in 0..=2 {
            for idx in multi_index_set(j, 2) {
                let d = marginal_consistency_check(&idx, &p).unwrap();
                let tol = if idx.is_zero() { 1e-10 } else { 1e-8 };
                assert!(d < tol, "{:?}: {d}", idx.m);
            }
        }
        assert!(marginal_consistency_check(&MultiIndex::zero(1), &p).is_err());
    }

    #[test]
    fn json_round_trip() {
        let p = params(5);
        let e = admissible_limit_expansion(&p, 1);
        let text = e.to_json().unwrap();
        assert!(text.contains("\"J\": 3"));
        let back = SpectralExpansion::from_json(&text).unwrap();
        assert_eq!(back, e);
        let bad = text.replacen("\"coeff\": 1.0", "\"coeff\": 2.0", 1);
        assert!(SpectralExpansion::from_json(&bad).is_err());
    }
}
