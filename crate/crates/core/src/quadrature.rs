//! Gauss–Legendre and Gauss–Hermite rules by Newton iteration on the
//! three-term recurrences.

use std::f64::consts::PI;

/// Nodes and weights on `[-1, 1]` with unit weight function.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
            }
            dp = nf * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Gauss–Legendre rule mapped to `[a, b]`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let h = 0.5 * (b - a);
    let c = 0.5 * (b + a);
    (
        x.iter().map(|t| c + h * t).collect(),
        w.iter().map(|wi| h * wi).collect(),
    )
}

/// Physicists' Gauss–Hermite rule: `int e^{-x^2} f(x) dx ~ sum w_i f(x_i)`.
/// Nodes ascending.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let pim4 = PI.powf(-0.25);
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            // orthonormal Hermite recurrence
            let (mut p1, mut p2) = (pim4, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / (pp * pp);
    }
    // fill symmetric half; x[0..m] currently descending positive
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..m {
        nodes[n - 1 - i] = x[i];
        weights[n - 1 - i] = w[i];
        nodes[i] = -x[i];
        weights[i] = w[i];
    }
    (nodes, weights)
}

/// Gauss–Hermite rule for plain integrals of functions that decay like a
/// Gaussian of mean `mean` and variance `var`: nodes `mean + sqrt(2 var) x_i`,
/// weights `sqrt(2 var) w_i e^{x_i^2}`.
pub fn gauss_hermite_scaled(n: usize, mean: f64, var: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_hermite(n);
    let s = (2.0 * var).sqrt();
    (
        x.iter().map(|xi| mean + s * xi).collect(),
        x.iter().zip(&w).map(|(xi, wi)| s * wi * (xi * xi).exp()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(10);
        for deg in 0..20 {
            let q: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(deg)).sum();
            let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
            assert!((q - exact).abs() < 1e-14, "deg {deg}: {q}");
        }
    }

    #[test]
    fn hermite_moments() {
        for n in [5usize, 20, 40, 64] {
            let (x, w) = gauss_hermite(n);
            let m0: f64 = w.iter().sum();
            assert!((m0 - PI.sqrt()).abs() < 1e-13, "n={n} m0={m0}");
            let m2: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi * xi).sum();
            assert!((m2 - 0.5 * PI.sqrt()).abs() < 1e-13);
            let m4: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(4)).sum();
            assert!((m4 - 0.75 * PI.sqrt()).abs() < 1e-12);
            assert!(x.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn scaled_rule_normalizes_gaussian() {
        let (x, w) = gauss_hermite_scaled(40, 0.7, 2.3);
        let f = |v: f64| (-(v - 0.7) * (v - 0.7) / (2.0 * 2.3)).exp() / (2.0 * PI * 2.3).sqrt();
        let m: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * f(*xi)).sum();
        assert!((m - 1.0).abs() < 1e-13);
    }
}
