//! The orthogonal change of variables that straightens the manifold, the
//! tangent-space projector, and uniform sampling.
//!
//! The rotation maps `v_1..v_N` to
//!
//! ```text
//! w_n = sqrt((N-n)/(N-n+1)) [ v_n - (1/(N-n)) sum_{i>n} v_i ],   n < N
//! w_N = (1/sqrt N) sum_i v_i
//! ```
//!
//! Both directions run in O(N) with suffix/prefix sums; no matrix is formed.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::model::{norm2, SystemParams, Vec3, VelocityState, WState};

/// Row coefficient `sqrt((N-n)/(N-n+1))` for the 1-based row `n < N`.
#[inline]
fn row_scale(n_particles: usize, row: usize) -> f64 {
    let k = (n_particles - row) as f64;
    (k / (k + 1.0)).sqrt()
}

/// Rotates to `(w_1..w_{N-1})` and returns `w_N` separately.
pub fn rotate_to_w(state: &VelocityState) -> (WState, Vec3) {
    let n = state.n();
    let mut suffix = vec![[0.0; 3]; n + 1];
    for i in (0..n).rev() {
        for k in 0..3 {
            suffix[i][k] = suffix[i + 1][k] + state.v[i][k];
        }
    }
    let mut w = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let row = i + 1;
        let a = row_scale(n, row);
        let rest = (n - row) as f64;
        let mut wi = [0.0; 3];
        for k in 0..3 {
            wi[k] = a * (state.v[i][k] - suffix[i + 1][k] / rest);
        }
        w.push(wi);
    }
    let sn = (n as f64).sqrt();
    let w_last = [suffix[0][0] / sn, suffix[0][1] / sn, suffix[0][2] / sn];
    (
        WState {
            w,
            params: state.params,
        },
        w_last,
    )
}

/// Inverse rotation with `w_N = sqrt(N) u0`.
pub fn rotate_from_w(w: &WState, params: &SystemParams) -> VelocityState {
    let n = params.n_particles;
    let sn = (n as f64).sqrt();
    let w_last = [sn * params.u0[0], sn * params.u0[1], sn * params.u0[2]];
    rotate_from_w_with_last(&w.w, w_last, params)
}

pub(crate) fn rotate_from_w_with_last(
    w: &[Vec3],
    w_last: Vec3,
    params: &SystemParams,
) -> VelocityState {
    let n = params.n_particles;
    debug_assert_eq!(w.len(), n - 1);
    let sn = (n as f64).sqrt();
    let base = [w_last[0] / sn, w_last[1] / sn, w_last[2] / sn];
    // prefix[i] = sum_{row < i} a_row w_row / (N - row)
    let mut prefix = [0.0; 3];
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let mut vi = [0.0; 3];
        for k in 0..3 {
            vi[k] = base[k] - prefix[k];
        }
        if i < n - 1 {
            let row = i + 1;
            let a = row_scale(n, row);
            let rest = (n - row) as f64;
            for k in 0..3 {
                vi[k] += a * w[i][k];
                prefix[k] += a * w[i][k] / rest;
            }
        }
        v.push(vi);
    }
    VelocityState { v, params: *params }
}

/// The first `n` rotated vectors computed from `v_1..v_n` alone.
///
/// On the manifold `sum_{i>n} v_i = N u0 - sum_{i<=n} v_i`, so rows `1..n` of
/// the rotation need nothing else. As `N` grows, `w_i -> v_i - u0`.
pub fn marginal_w_block(v_block: &[Vec3], params: &SystemParams) -> Vec<Vec3> {
    let n_total = params.n_particles;
    let nf = n_total as f64;
    let mut head = [0.0; 3];
    let mut out = Vec::with_capacity(v_block.len());
    for (i, vi) in v_block.iter().enumerate() {
        let row = i + 1;
        for k in 0..3 {
            head[k] += vi[k];
        }
        let a = row_scale(n_total, row);
        let rest = (n_total - row) as f64;
        let mut wi = [0.0; 3];
        for k in 0..3 {
            let tail = nf * params.u0[k] - head[k];
            wi[k] = a * (vi[k] - tail / rest);
        }
        out.push(wi);
    }
    out
}

/// Jacobian `|d w_block / d v_block| = (N/(N-n))^{3/2}` of [`marginal_w_block`].
pub fn marginal_jacobian(n_block: usize, n_particles: usize) -> f64 {
    let r = n_particles as f64 / (n_particles - n_block) as f64;
    r.powf(1.5)
}

/// Orthogonal projection of a `3N`-vector onto the tangent space at `state`:
/// `(I - (1/N) sum_s e_s e_s^T - (v-u)(v-u)^T / (2 N eps0)) g`.
pub fn project_tangent(state: &VelocityState, g: &[f64]) -> Vec<f64> {
    let mut out = g.to_vec();
    project_tangent_in_place(state, &mut out);
    out
}

pub(crate) fn project_tangent_in_place(state: &VelocityState, g: &mut [f64]) {
    let n = state.n();
    debug_assert_eq!(g.len(), 3 * n);
    let p = &state.params;
    let mut mean = [0.0; 3];
    for i in 0..n {
        for k in 0..3 {
            mean[k] += g[3 * i + k];
        }
    }
    for k in 0..3 {
        mean[k] /= n as f64;
    }
    // literal projector form; e_s and v-u are orthogonal only on the manifold
    let mut radial = 0.0;
    for i in 0..n {
        for k in 0..3 {
            radial += (state.v[i][k] - p.u0[k]) * g[3 * i + k];
        }
    }
    let c = radial / p.radius_squared();
    for i in 0..n {
        for k in 0..3 {
            g[3 * i + k] -= mean[k] + c * (state.v[i][k] - p.u0[k]);
        }
    }
}

/// Puts a near-manifold state back on the manifold: recentre the momentum,
/// then rescale deviations from `u0` to radius `sqrt(2 N eps0)`.
pub fn reproject(state: &mut VelocityState) {
    let p = state.params;
    let n = state.n();
    let mut mean = [0.0; 3];
    for v in &state.v {
        for k in 0..3 {
            mean[k] += v[k];
        }
    }
    for k in 0..3 {
        mean[k] = mean[k] / n as f64 - p.u0[k];
    }
    let mut r2 = 0.0;
    for v in state.v.iter_mut() {
        for k in 0..3 {
            v[k] -= mean[k];
        }
        let d = [v[0] - p.u0[0], v[1] - p.u0[1], v[2] - p.u0[2]];
        r2 += norm2(&d);
    }
    let scale = (p.radius_squared() / r2).sqrt();
    for v in state.v.iter_mut() {
        for k in 0..3 {
            v[k] = p.u0[k] + (v[k] - p.u0[k]) * scale;
        }
    }
}

/// Uniform sample on the manifold: Gaussian direction in `w`-space scaled to
/// the sphere radius, then rotated back.
pub fn sample_uniform<R: Rng + ?Sized>(params: &SystemParams, rng: &mut R) -> VelocityState {
    let w = sample_uniform_w(params, rng);
    rotate_from_w(&w, params)
}

pub fn sample_uniform_w<R: Rng + ?Sized>(params: &SystemParams, rng: &mut R) -> WState {
    let m = params.n_particles - 1;
    let mut w = vec![[0.0; 3]; m];
    let mut r2;
    loop {
        r2 = 0.0;
        for wi in w.iter_mut() {
            for c in wi.iter_mut() {
                *c = rng.sample(StandardNormal);
            }
            r2 += norm2(wi);
        }
        if r2 > 0.0 {
            break;
        }
    }
    let s = params.radius() / r2.sqrt();
    for wi in w.iter_mut() {
        for c in wi.iter_mut() {
            *c *= s;
        }
    }
    WState { w, params: *params }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derive_params, manifold_residuals, TOL_CONSTRAINT};
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn params(n: usize) -> SystemParams {
        derive_params([0.4, -0.3, 1.1], 2.0, n).unwrap()
    }

    /// Dense rotation matrix rows (per velocity component) for reference checks.
    fn dense_rows(n: usize) -> Vec<Vec<f64>> {
        let mut rows = Vec::new();
        for row in 1..n {
            let a = row_scale(n, row);
            let rest = (n - row) as f64;
            let mut r = vec![0.0; n];
            r[row - 1] = a;
            for x in r.iter_mut().skip(row) {
                *x = -a / rest;
            }
            rows.push(r);
        }
        rows.push(vec![1.0 / (n as f64).sqrt(); n]);
        rows
    }

    #[test]
    fn rotation_rows_are_orthonormal() {
        for n in [2, 3, 5, 8] {
            let rows = dense_rows(n);
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-14, "N={n} rows {i},{j}: {dot}");
                }
            }
        }
    }

    #[test]
    fn all_at_drift_maps_to_zero() {
        let p = params(6);
        let s = VelocityState::new(vec![p.u0; 6], p).unwrap();
        let (w, wn) = rotate_to_w(&s);
        assert!(w.w.iter().all(|x| norm2(x) < 1e-28));
        for k in 0..3 {
            assert!((wn[k] - 6f64.sqrt() * p.u0[k]).abs() < 1e-14);
        }
        let back = rotate_from_w(&WState { w: vec![[0.0; 3]; 5], params: p }, &p);
        for v in &back.v {
            for k in 0..3 {
                assert!((v[k] - p.u0[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_particles_is_scaled_difference() {
        let p = params(2);
        let s = VelocityState::new(vec![[1.0, 2.0, 3.0], [0.5, -1.0, 4.0]], p).unwrap();
        let (w, _) = rotate_to_w(&s);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(w.w.len(), 1);
        for k in 0..3 {
            assert!((w.w[0][k] - r * (s.v[0][k] - s.v[1][k])).abs() < 1e-15);
        }
    }

    #[test]
    fn sampled_states_sit_on_manifold() {
        for n in [2, 3, 8, 64] {
            let p = params(n);
            let mut rng = stream(11, n as u64);
            for _ in 0..20 {
                let s = sample_uniform(&p, &mut rng);
                let (dp, de) = manifold_residuals(&s);
                assert!(norm2(&dp).sqrt() <= TOL_CONSTRAINT * (n as f64).sqrt());
                assert!(de.abs() <= TOL_CONSTRAINT * n as f64);
                let (w, wn) = rotate_to_w(&s);
                assert!(w.satisfies_constraints(TOL_CONSTRAINT));
                for k in 0..3 {
                    assert!((wn[k] - (n as f64).sqrt() * p.u0[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn projector_kills_normals() {
        let p = params(5);
        let s = sample_uniform(&p, &mut stream(3, 0));
        let radial: Vec<f64> = s
            .v
            .iter()
            .flat_map(|v| (0..3).map(move |k| v[k] - p.u0[k]))
            .collect();
        let pr = project_tangent(&s, &radial);
        assert!(pr.iter().all(|x| x.abs() < 1e-12));
        let mut e1 = vec![0.0; 15];
        for i in 0..5 {
            e1[3 * i] = 1.0;
        }
        let pe = project_tangent(&s, &e1);
        assert!(pe.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn marginal_block_matches_full_rotation_rows() {
        let p = params(7);
        let s = sample_uniform(&p, &mut stream(5, 1));
        let (w, _) = rotate_to_w(&s);
        let wb = marginal_w_block(&s.v[..3], &p);
        for i in 0..3 {
            for k in 0..3 {
                assert!((wb[i][k] - w.w[i][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn marginal_block_tends_to_translation() {
        // Fixed v_1, v_2; the tail fills whatever the constraints need.
        let base = derive_params([0.2, 0.0, -0.5], 1.5, 10).unwrap();
        let block = [[1.0, -0.5, 0.3], [-0.8, 0.9, 0.1]];
        let mut errs = Vec::new();
        for n in [10usize, 100, 1000] {
            let p = base.with_particles(n).unwrap();
            let wb = marginal_w_block(&block, &p);
            let err = (0..2)
                .map(|i| {
                    let d = [
                        wb[i][0] - (block[i][0] - p.u0[0]),
                        wb[i][1] - (block[i][1] - p.u0[1]),
                        wb[i][2] - (block[i][2] - p.u0[2]),
                    ];
                    norm2(&d).sqrt()
                })
                .fold(0.0, f64::max);
            errs.push(err * n as f64);
        }
        // err * N roughly constant => O(1/N)
        for e in &errs {
            assert!(*e < 5.0 && *e > 0.05, "{errs:?}");
        }
    }

    #[test]
    fn uniform_second_moments() {
        let p = derive_params([0.5, 0.0, 0.0], 1.625, 4).unwrap();
        let mut rng = stream(99, 0);
        let n_samp = 200_000;
        let (mut m1, mut var, mut cov) = (0.0, 0.0, 0.0);
        for _ in 0..n_samp {
            let s = sample_uniform(&p, &mut rng);
            let a = s.v[0][0] - p.u0[0];
            let b = s.v[1][0] - p.u0[0];
            m1 += a;
            var += a * a;
            cov += a * b;
        }
        let nf = n_samp as f64;
        let (m1, var, cov) = (m1 / nf, var / nf, cov / nf);
        let want_var = 2.0 * p.eps0 / 3.0;
        let want_cov = -2.0 * p.eps0 / (3.0 * 3.0);
        assert!(m1.abs() < 4.0 * (want_var / nf).sqrt());
        assert!((var - want_var).abs() < 0.01 * want_var, "var {var}");
        assert!((cov - want_cov).abs() < 0.008, "cov {cov} want {want_cov}");
    }

    proptest! {
        #[test]
        fn round_trip_and_norm(n in 2usize..12, seed in 0u64..1000) {
            let p = params(n);
            let mut rng = stream(seed, 0);
            let s = sample_uniform(&p, &mut rng);
            let (w, wn) = rotate_to_w(&s);
            let back = rotate_from_w(&w, &p);
            for (a, b) in back.v.iter().zip(&s.v) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() < 1e-12);
                }
            }
            let lhs: f64 = w.norm_squared() + norm2(&wn);
            let rhs: f64 = s.v.iter().map(norm2).sum();
            prop_assert!((lhs - rhs).abs() < 1e-11 * rhs.max(1.0));
        }

        #[test]
        fn projector_idempotent_symmetric(n in 2usize..10, seed in 0u64..1000) {
            let p = params(n);
            let mut rng = stream(seed, 1);
            let s = sample_uniform(&p, &mut rng);
            let a: Vec<f64> = (0..3 * n).map(|_| rng.sample(StandardNormal)).collect();
            let b: Vec<f64> = (0..3 * n).map(|_| rng.sample(StandardNormal)).collect();
            let pa = project_tangent(&s, &a);
            let ppa = project_tangent(&s, &pa);
            for (x, y) in pa.iter().zip(&ppa) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let pb = project_tangent(&s, &b);
            let l: f64 = a.iter().zip(&pb).map(|(x, y)| x * y).sum();
            let r: f64 = pa.iter().zip(&b).map(|(x, y)| x * y).sum();
            prop_assert!((l - r).abs() < 1e-12 * (1.0 + l.abs()));
        }
    }
}
