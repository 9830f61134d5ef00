//! Monte Carlo simulation of the sphere diffusion.
//!
//! Two schemes: projected Euler-Maruyama in velocity space, and sweeps of
//! random planar rotations over all coordinate pairs of the rotated vector.
//! Ensembles run on rayon; trajectory `i` draws from stream `(seed, i)` and
//! float estimators are summed in fixed chunk order, so results are bitwise
//! identical for any thread count.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    project_tangent_in_place, reproject, rotate_from_w, rotate_to_w, sample_uniform,
};
use crate::grid::{Axis, DensityGrid};
use crate::model::{manifold_residuals, norm2, SystemParams, Vec3, VelocityState, WState};
use crate::rng::stream;

const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ProjectedEm,
    PairRotation,
}

/// `1e-3 (2 N eps0) / (3N - 4)`.
pub fn default_dtau(params: &SystemParams) -> f64 {
    let n = params.n_particles as f64;
    1e-3 * params.radius_squared() / (3.0 * n - 4.0).max(1.0)
}

fn check_step(dtau: f64) -> Result<()> {
    if dtau > 0.0 && dtau.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveStep(dtau))
    }
}

/// One projected Euler-Maruyama step followed by exact re-projection.
pub fn step_projected_em<R: Rng + ?Sized>(
    state: &VelocityState,
    dtau: f64,
    rng: &mut R,
) -> Result<VelocityState> {
    check_step(dtau)?;
    let mut out = state.clone();
    let mut buf = vec![0.0; 3 * state.n()];
    em_in_place(&mut out, dtau, rng, &mut buf, true);
    Ok(out)
}

/// Same step without the re-projection; drifts off the manifold.
#[doc(hidden)]
pub fn step_projected_em_unprojected<R: Rng + ?Sized>(
    state: &VelocityState,
    dtau: f64,
    rng: &mut R,
) -> Result<VelocityState> {
    check_step(dtau)?;
    let mut out = state.clone();
    let mut buf = vec![0.0; 3 * state.n()];
    em_in_place(&mut out, dtau, rng, &mut buf, false);
    Ok(out)
}

fn em_in_place<R: Rng + ?Sized>(
    state: &mut VelocityState,
    dtau: f64,
    rng: &mut R,
    buf: &mut [f64],
    project_back: bool,
) {
    for x in buf.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
    project_tangent_in_place(state, buf);
    let s = (2.0 * dtau).sqrt();
    for (i, v) in state.v.iter_mut().enumerate() {
        for k in 0..3 {
            v[k] += s * buf[3 * i + k];
        }
    }
    if project_back {
        reproject(state);
    }
}

/// Reusable pair list for the rotation scheme.
#[derive(Debug, Clone)]
pub struct PairSweep {
    pairs: Vec<(u32, u32)>,
    dim: usize,
}

impl PairSweep {
    /// All `d (d-1) / 2` coordinate pairs of a `d`-vector.
    pub fn new(dim: usize) -> Self {
        let mut pairs = Vec::with_capacity(dim * dim.saturating_sub(1) / 2);
        for k in 0..dim {
            for l in k + 1..dim {
                pairs.push((k as u32, l as u32));
            }
        }
        PairSweep { pairs, dim }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Shuffles the pairs, then rotates each plane by `N(0, sigma^2)`.
    pub fn sweep<R: Rng + ?Sized>(&mut self, w: &mut [f64], sigma: f64, rng: &mut R) {
        debug_assert_eq!(w.len(), self.dim);
        self.pairs.shuffle(rng);
        for &(k, l) in &self.pairs {
            let theta: f64 = sigma * rng.sample::<f64, _>(StandardNormal);
            rotate_pair(w, k as usize, l as usize, theta);
        }
    }
}

/// Rotates coordinates `(k, l)` of `w` by `theta`.
#[inline]
pub fn rotate_pair(w: &mut [f64], k: usize, l: usize, theta: f64) {
    let (s, c) = theta.sin_cos();
    let (a, b) = (w[k], w[l]);
    w[k] = c * a - s * b;
    w[l] = s * a + c * b;
}

/// One sweep of planar rotations, angle variance `2 dtau / (2 N eps0)`.
pub fn step_pair_rotation<R: Rng + ?Sized>(
    state: &WState,
    dtau: f64,
    rng: &mut R,
) -> Result<WState> {
    check_step(dtau)?;
    let mut flat: Vec<f64> = state.w.iter().flat_map(|x| x.iter().copied()).collect();
    let mut sweep = PairSweep::new(flat.len());
    sweep.sweep(&mut flat, pair_sigma(&state.params, dtau), rng);
    Ok(WState {
        w: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        params: state.params,
    })
}

fn pair_sigma(params: &SystemParams, dtau: f64) -> f64 {
    (2.0 * dtau / params.radius_squared()).sqrt()
}

/// Histogram layout: `bins` cells per axis over `centre +- half_width`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub bins: usize,
    pub half_width: f64,
}

impl HistogramSpec {
    /// 64 bins over five Maxwellian standard deviations.
    pub fn default_for(params: &SystemParams) -> Self {
        HistogramSpec {
            bins: 64,
            half_width: 5.0 * params.temperature().sqrt(),
        }
    }

    pub fn axis(&self, centre: f64) -> Axis {
        Axis::bins(centre - self.half_width, centre + self.half_width, self.bins)
    }

    fn bin_of(&self, x: f64) -> Option<usize> {
        let u = (x + self.half_width) / (2.0 * self.half_width) * self.bins as f64;
        if u >= 0.0 && u < self.bins as f64 {
            Some(u as usize)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    /// Independent uniform samples on the manifold.
    Uniform,
    /// Every trajectory starts at the same state.
    Point(VelocityState),
}

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub scheme: Scheme,
    pub n_traj: usize,
    pub checkpoints: Vec<f64>,
    pub dtau: f64,
    pub seed: u64,
    pub initial: InitialCondition,
    /// 3D histogram of `v_1 - u0`.
    pub histogram: Option<HistogramSpec>,
    /// 2D histogram of `(v_11 - u0_1, v_21 - u0_1)`.
    pub pair_histogram: Option<HistogramSpec>,
    pub keep_states: bool,
}

impl EnsembleConfig {
    pub fn new(params: &SystemParams, scheme: Scheme, n_traj: usize, checkpoints: Vec<f64>, seed: u64) -> Self {
        EnsembleConfig {
            scheme,
            n_traj,
            checkpoints,
            dtau: default_dtau(params),
            seed,
            initial: InitialCondition::Uniform,
            histogram: None,
            pair_histogram: None,
            keep_states: false,
        }
    }
}

/// Estimators at one checkpoint. Moments refer to particle 1; `pair_cov[a][b]`
/// is `Cov(v_1a, v_2b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub tau: f64,
    pub sample_count: usize,
    pub mean: Vec3,
    pub mean_stderr: Vec3,
    pub variance: Vec3,
    pub variance_stderr: Vec3,
    pub pair_cov: [[f64; 3]; 3],
    pub pair_cov_stderr: [[f64; 3]; 3],
    pub max_momentum_residual: f64,
    pub max_energy_residual: f64,
    #[serde(skip)]
    pub histogram: Option<DensityGrid>,
    #[serde(skip)]
    pub pair_histogram: Option<DensityGrid>,
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub params: SystemParams,
    pub scheme: Scheme,
    pub dtau: f64,
    pub steps: Vec<usize>,
    pub stats: Vec<EnsembleStats>,
    /// `[checkpoint][trajectory]`, when requested.
    pub states: Option<Vec<Vec<VelocityState>>>,
    /// Largest momentum and energy residual seen by each trajectory, per
    /// checkpoint: `[checkpoint][trajectory]`.
    pub residuals: Vec<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Default)]
struct Acc {
    // sums in z = v - u0 coordinates
    s1: [f64; 3],
    s2: [f64; 3],
    s4: [f64; 3],
    z2: [f64; 3],
    c1: [[f64; 3]; 3],
    c2: [[f64; 3]; 3],
    max_mom: f64,
    max_en: f64,
}

impl Acc {
    fn add(&mut self, z1: &Vec3, z2: &Vec3, mom: f64, en: f64) {
        for a in 0..3 {
            self.s1[a] += z1[a];
            let q = z1[a] * z1[a];
            self.s2[a] += q;
            self.s4[a] += q * q;
            self.z2[a] += z2[a];
            for b in 0..3 {
                let p = z1[a] * z2[b];
                self.c1[a][b] += p;
                self.c2[a][b] += p * p;
            }
        }
        self.max_mom = self.max_mom.max(mom);
        self.max_en = self.max_en.max(en);
    }

    fn merge(&mut self, o: &Acc) {
        for a in 0..3 {
            self.s1[a] += o.s1[a];
            self.s2[a] += o.s2[a];
            self.s4[a] += o.s4[a];
            self.z2[a] += o.z2[a];
            for b in 0..3 {
                self.c1[a][b] += o.c1[a][b];
                self.c2[a][b] += o.c2[a][b];
            }
        }
        self.max_mom = self.max_mom.max(o.max_mom);
        self.max_en = self.max_en.max(o.max_en);
    }
}

struct ChunkOut {
    accs: Vec<Acc>,
    states: Vec<Vec<VelocityState>>,
    residuals: Vec<Vec<(f64, f64)>>,
}

/// Runs `n_traj` independent trajectories and reports estimators at each
/// checkpoint. Checkpoint `c` is reached after `round(tau_c / dtau)` steps.
pub fn simulate_ensemble(params: &SystemParams, cfg: &EnsembleConfig) -> Result<EnsembleRun> {
    check_step(cfg.dtau)?;
    if cfg.n_traj == 0 {
        return Err(Error::InvalidArgument("n_traj must be at least 1".into()));
    }
    if cfg.checkpoints.is_empty() {
        return Err(Error::InvalidArgument("no checkpoints".into()));
    }
    let cps = &cfg.checkpoints;
    let increasing = cps.windows(2).all(|p| p[1] - p[0] >= cfg.dtau * (1.0 - 1e-9));
    if !(cps[0] >= 0.0) || !increasing {
        return Err(Error::InvalidArgument(format!(
            "checkpoints must be >= 0 and increase by at least dtau; got {cps:?}"
        )));
    }
    if let InitialCondition::Point(s) = &cfg.initial {
        if s.n() != params.n_particles {
            return Err(Error::ParticleCountMismatch {
                expected: params.n_particles,
                got: s.n(),
            });
        }
    }
    let steps: Vec<usize> = cfg
        .checkpoints
        .iter()
        .map(|t| (t / cfg.dtau).round() as usize)
        .collect();
    let n_cp = steps.len();
    let hist_len = cfg.histogram.map_or(0, |h| h.bins.pow(3));
    let pair_len = cfg.pair_histogram.map_or(0, |h| h.bins.pow(2));
    let hist: Vec<Vec<AtomicU64>> = (0..n_cp)
        .map(|_| (0..hist_len).map(|_| AtomicU64::new(0)).collect())
        .collect();
    let pair_hist: Vec<Vec<AtomicU64>> = (0..n_cp)
        .map(|_| (0..pair_len).map(|_| AtomicU64::new(0)).collect())
        .collect();

    let n_chunks = cfg.n_traj.div_ceil(CHUNK);
    let chunks: Vec<ChunkOut> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(cfg.n_traj);
            let mut out = ChunkOut {
                accs: vec![Acc::default(); n_cp],
                states: vec![Vec::new(); n_cp],
                residuals: vec![Vec::with_capacity(hi - lo); n_cp],
            };
            let mut runner = Runner::new(params, cfg);
            for traj in lo..hi {
                let mut rng = stream(cfg.seed, traj as u64);
                runner.start(&cfg.initial, &mut rng);
                let mut done = 0;
                for (cp, &target) in steps.iter().enumerate() {
                    runner.advance(target - done, &mut rng);
                    done = target;
                    let state = runner.state();
                    let z1 = sub(&state.v[0], &params.u0);
                    let z2 = sub(&state.v[1], &params.u0);
                    out.accs[cp].add(&z1, &z2, runner.max_mom, runner.max_en);
                    out.residuals[cp].push((runner.max_mom, runner.max_en));
                    if let Some(h) = &cfg.histogram {
                        if let (Some(a), Some(b), Some(d)) =
                            (h.bin_of(z1[0]), h.bin_of(z1[1]), h.bin_of(z1[2]))
                        {
                            hist[cp][(a * h.bins + b) * h.bins + d].fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    if let Some(h) = &cfg.pair_histogram {
                        if let (Some(a), Some(b)) = (h.bin_of(z1[0]), h.bin_of(z2[0])) {
                            pair_hist[cp][a * h.bins + b].fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    if cfg.keep_states {
                        out.states[cp].push(state);
                    }
                }
            }
            out
        })
        .collect();

    let mut total = vec![Acc::default(); n_cp];
    let mut states = cfg.keep_states.then(|| vec![Vec::with_capacity(cfg.n_traj); n_cp]);
    let mut residuals = vec![Vec::with_capacity(cfg.n_traj); n_cp];
    for ch in chunks {
        for cp in 0..n_cp {
            total[cp].merge(&ch.accs[cp]);
            residuals[cp].extend_from_slice(&ch.residuals[cp]);
        }
        if let Some(st) = states.as_mut() {
            for (cp, s) in ch.states.into_iter().enumerate() {
                st[cp].extend(s);
            }
        }
    }

    let stats = (0..n_cp)
        .map(|cp| {
            let mut s = finish(&total[cp], cfg.n_traj, cfg.checkpoints[cp], params);
            if let Some(h) = &cfg.histogram {
                let counts: Vec<u64> = hist[cp].iter().map(|x| x.load(Ordering::Relaxed)).collect();
                s.histogram = Some(normalize_counts(&counts, vec![h.axis(0.0); 3], 1));
            }
            if let Some(h) = &cfg.pair_histogram {
                let counts: Vec<u64> = pair_hist[cp].iter().map(|x| x.load(Ordering::Relaxed)).collect();
                s.pair_histogram = Some(normalize_counts(&counts, vec![h.axis(0.0); 2], 2));
            }
            s
        })
        .collect();
    Ok(EnsembleRun {
        params: *params,
        scheme: cfg.scheme,
        dtau: cfg.dtau,
        steps,
        stats,
        states,
        residuals,
    })
}

fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn finish(acc: &Acc, n: usize, tau: f64, params: &SystemParams) -> EnsembleStats {
    let nf = n as f64;
    let dof = (nf - 1.0).max(1.0);
    let mut mean = [0.0; 3];
    let mut mean_stderr = [0.0; 3];
    let mut variance = [0.0; 3];
    let mut variance_stderr = [0.0; 3];
    let mut pair_cov = [[0.0; 3]; 3];
    let mut pair_cov_stderr = [[0.0; 3]; 3];
    for a in 0..3 {
        let m = acc.s1[a] / nf;
        let var = (acc.s2[a] / nf - m * m) * nf / dof;
        mean[a] = params.u0[a] + m;
        mean_stderr[a] = (var.max(0.0) / nf).sqrt();
        variance[a] = var;
        let m4 = acc.s4[a] / nf;
        let m2 = acc.s2[a] / nf;
        variance_stderr[a] = ((m4 - m2 * m2).max(0.0) / nf).sqrt();
        for b in 0..3 {
            let mb = acc.z2[b] / nf;
            let e = acc.c1[a][b] / nf;
            pair_cov[a][b] = (e - m * mb) * nf / dof;
            let v = acc.c2[a][b] / nf - e * e;
            pair_cov_stderr[a][b] = (v.max(0.0) / nf).sqrt();
        }
    }
    EnsembleStats {
        tau,
        sample_count: n,
        mean,
        mean_stderr,
        variance,
        variance_stderr,
        pair_cov,
        pair_cov_stderr,
        max_momentum_residual: acc.max_mom,
        max_energy_residual: acc.max_en,
        histogram: None,
        pair_histogram: None,
    }
}

fn normalize_counts(counts: &[u64], axes: Vec<Axis>, n: usize) -> DensityGrid {
    let g = DensityGrid::zeros(n, axes);
    let total: u64 = counts.iter().sum();
    let vol = if g.is_empty() { 1.0 } else { g.weight(0) };
    let denom = total.max(1) as f64 * vol;
    g.with_values(counts.iter().map(|&c| c as f64 / denom).collect())
}

/// Per-trajectory stepping state for either scheme.
struct Runner {
    params: SystemParams,
    scheme: Scheme,
    dtau: f64,
    v: VelocityState,
    w: Vec<f64>,
    buf: Vec<f64>,
    sweep: PairSweep,
    sigma: f64,
    max_mom: f64,
    max_en: f64,
}

impl Runner {
    fn new(params: &SystemParams, cfg: &EnsembleConfig) -> Self {
        let n = params.n_particles;
        let dim = 3 * (n - 1);
        Runner {
            params: *params,
            scheme: cfg.scheme,
            dtau: cfg.dtau,
            v: VelocityState {
                v: vec![params.u0; n],
                params: *params,
            },
            w: vec![0.0; dim],
            buf: vec![0.0; 3 * n],
            sweep: PairSweep::new(if cfg.scheme == Scheme::PairRotation { dim } else { 0 }),
            sigma: pair_sigma(params, cfg.dtau),
            max_mom: 0.0,
            max_en: 0.0,
        }
    }

    fn start<R: Rng + ?Sized>(&mut self, init: &InitialCondition, rng: &mut R) {
        self.v = match init {
            InitialCondition::Uniform => sample_uniform(&self.params, rng),
            InitialCondition::Point(s) => s.clone(),
        };
        if self.scheme == Scheme::PairRotation {
            let (w, _) = rotate_to_w(&self.v);
            for (dst, src) in self.w.chunks_exact_mut(3).zip(&w.w) {
                dst.copy_from_slice(src);
            }
        }
        self.max_mom = 0.0;
        self.max_en = 0.0;
        self.track();
    }

    fn advance<R: Rng + ?Sized>(&mut self, steps: usize, rng: &mut R) {
        for _ in 0..steps {
            match self.scheme {
                Scheme::ProjectedEm => {
                    em_in_place(&mut self.v, self.dtau, rng, &mut self.buf, true);
                }
                Scheme::PairRotation => {
                    self.sweep.sweep(&mut self.w, self.sigma, rng);
                    let r2: f64 = self.w.iter().map(|x| x * x).sum();
                    let s = (self.params.radius_squared() / r2).sqrt();
                    for x in self.w.iter_mut() {
                        *x *= s;
                    }
                    self.sync_v();
                }
            }
            self.track();
        }
    }

    fn sync_v(&mut self) {
        let w = WState {
            w: self.w.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            params: self.params,
        };
        self.v = rotate_from_w(&w, &self.params);
    }

    fn track(&mut self) {
        let (dp, de) = manifold_residuals(&self.v);
        self.max_mom = self.max_mom.max(norm2(&dp).sqrt());
        self.max_en = self.max_en.max(de.abs());
    }

    fn state(&self) -> VelocityState {
        self.v.clone()
    }
}

/// Normalized histogram density of `v_1` (`n = 1`, 3 axes centred at `u0`)
/// or of the first components `(v_11, v_21)` (`n = 2`, 2 axes). Samples
/// outside the grid are dropped before normalizing.
pub fn empirical_marginal(
    states: &[VelocityState],
    n: usize,
    spec: &HistogramSpec,
) -> Result<DensityGrid> {
    if n == 0 || n > 2 {
        return Err(Error::InvalidArgument(format!(
            "empirical marginals support n = 1 or 2, got {n}"
        )));
    }
    let first = states
        .first()
        .ok_or_else(|| Error::InvalidArgument("no states".into()))?;
    let u = first.params.u0;
    if n == 2 && first.n() < 2 {
        return Err(Error::InvalidArgument("need at least 2 particles".into()));
    }
    let b = spec.bins;
    let (axes, len) = if n == 1 {
        ((0..3).map(|c| spec.axis(u[c])).collect::<Vec<_>>(), b * b * b)
    } else {
        (vec![spec.axis(u[0]), spec.axis(u[0])], b * b)
    };
    let mut counts = vec![0u64; len];
    for s in states {
        if n == 1 {
            let z = sub(&s.v[0], &u);
            if let (Some(x), Some(y), Some(w)) = (spec.bin_of(z[0]), spec.bin_of(z[1]), spec.bin_of(z[2])) {
                counts[(x * b + y) * b + w] += 1;
            }
        } else if let (Some(x), Some(y)) = (spec.bin_of(s.v[0][0] - u[0]), spec.bin_of(s.v[1][0] - u[0])) {
            counts[x * b + y] += 1;
        }
    }
    Ok(normalize_counts(&counts, axes, n))
}
