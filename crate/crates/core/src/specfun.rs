//! Hermite polynomials, Gamma-function ratios, and the `q`-dimensional
//! associated Legendre functions together with their high-dimension limit.
//!
//! The associated Legendre function of degree `s`, order `r` in `q`
//! dimensions is normalized as
//!
//! ```text
//! P_s^r(t; q) = sqrt(q)^{s+r} (s!/2^r) sum_l (-1/4)^l (1-t^2)^{l+r/2} t^{s-r-2l}
//!               / (l! (s-r-2l)!) * Gamma((q-1)/2) / Gamma(l + r + (q-1)/2)
//! ```
//!
//! With `t = w / sqrt(2 N eps0)` and `q = 3N - p` it tends, as `N -> inf`, to
//! `(s!/(s-r)!) 2^{(r-s)/2} H_{s-r}(sqrt(3/(4 eps0)) w)`.

use crate::error::{Error, Result};

/// Physicists' Hermite polynomial `H_k(x)` (leading coefficient `2^k`).
pub fn hermite(k: usize, x: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let (mut h0, mut h1) = (1.0, 2.0 * x);
    for j in 1..k {
        let h2 = 2.0 * x * h1 - 2.0 * j as f64 * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// `H_k'(x) = 2k H_{k-1}(x)`.
pub fn hermite_derivative(k: usize, x: f64) -> f64 {
    if k == 0 {
        0.0
    } else {
        2.0 * k as f64 * hermite(k - 1, x)
    }
}

/// `ln(n!)` for small `n`, summed directly.
pub fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

pub fn factorial(n: usize) -> f64 {
    (2..=n).map(|i| i as f64).product()
}

// B_{2k} / (2k (2k-1)), k = 1..8
const STIRLING: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
    -3617.0 / 122400.0,
];

const SHIFT_TO: f64 = 30.0;

/// `ln Gamma(x + a) - ln Gamma(x)` without forming either logarithm.
pub fn ln_gamma_ratio_inv(x: f64, a: f64) -> f64 {
    debug_assert!(x > 0.0 && a >= 0.0);
    if a == 0.0 {
        return 0.0;
    }
    let mut y = x;
    let mut acc = 0.0;
    // Gamma(y+a)/Gamma(y) = [y/(y+a)] Gamma(y+1+a)/Gamma(y+1)
    while y < SHIFT_TO {
        acc -= (a / y).ln_1p();
        y += 1.0;
    }
    let ya = y + a;
    let mut d = (y - 0.5) * (a / y).ln_1p() + a * ya.ln() - a;
    let (mut py, mut pya) = (1.0 / y, 1.0 / ya);
    let (iy2, iya2) = (py * py, pya * pya);
    for c in STIRLING {
        d += c * (pya - py);
        py *= iy2;
        pya *= iya2;
    }
    acc + d
}

/// `Gamma(x) / Gamma(a + x)` for `x > 0`, `a >= 0`.
pub fn gamma_ratio(x: f64, a: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gamma_ratio needs x > 0, got {x}"
        )));
    }
    if !(a >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma_ratio needs a >= 0, got {a}"
        )));
    }
    Ok((-ln_gamma_ratio_inv(x, a)).exp())
}

/// Precomputed coefficients of one associated Legendre function, so that
/// repeated evaluation costs a few multiplications.
#[derive(Debug, Clone)]
pub struct AssocLegendre {
    s: usize,
    r: usize,
    q: usize,
    // (l, sign, ln|c_l|, c_l)
    terms: Vec<(usize, f64, f64, f64)>,
    use_logs: bool,
}

impl AssocLegendre {
    pub fn new(s: usize, r: usize, q: usize) -> Result<Self> {
        if r > s {
            return Err(Error::InvalidArgument(format!("order {r} exceeds degree {s}")));
        }
        if q < 2 {
            return Err(Error::InvalidArgument(format!("dimension q={q} < 2")));
        }
        let qf = q as f64;
        let x = 0.5 * (qf - 1.0);
        let base = 0.5 * (s + r) as f64 * qf.ln() + ln_factorial(s)
            - r as f64 * std::f64::consts::LN_2;
        let mut terms = Vec::new();
        let mut use_logs = false;
        for l in 0..=(s - r) / 2 {
            let logc = base - 2.0 * l as f64 * std::f64::consts::LN_2
                - ln_factorial(l)
                - ln_factorial(s - r - 2 * l)
                - ln_gamma_ratio_inv(x, (l + r) as f64);
            let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
            if logc.abs() > 690.0 {
                use_logs = true;
            }
            terms.push((l, sign, logc, sign * logc.exp()));
        }
        Ok(AssocLegendre {
            s,
            r,
            q,
            terms,
            use_logs,
        })
    }

    pub fn degree(&self) -> usize {
        self.s
    }

    pub fn order(&self) -> usize {
        self.r
    }

    pub fn dimension(&self) -> usize {
        self.q
    }

    /// Value at `t` in `[-1, 1]` (not checked here).
    pub fn eval(&self, t: f64) -> f64 {
        let one_m = (1.0 - t * t).max(0.0);
        let k = self.s - self.r;
        if self.use_logs {
            return self.eval_logs(t, one_m);
        }
        let half = if self.r % 2 == 1 { one_m.sqrt() } else { 1.0 };
        let mut sum = 0.0;
        for &(l, _, _, c) in &self.terms {
            sum += c * one_m.powi((l + self.r / 2) as i32) * t.powi((k - 2 * l) as i32);
        }
        sum * half
    }

    fn eval_logs(&self, t: f64, one_m: f64) -> f64 {
        let k = self.s - self.r;
        let mut sum = 0.0;
        for &(l, sign, logc, _) in &self.terms {
            let e1 = l as f64 + 0.5 * self.r as f64;
            let e2 = (k - 2 * l) as i32;
            let f1 = if e1 == 0.0 {
                0.0
            } else if one_m == 0.0 {
                continue;
            } else {
                e1 * one_m.ln()
            };
            let (f2, sgn_t) = if e2 == 0 {
                (0.0, 1.0)
            } else if t == 0.0 {
                continue;
            } else {
                let sg = if t < 0.0 && e2 % 2 == 1 { -1.0 } else { 1.0 };
                (e2 as f64 * t.abs().ln(), sg)
            };
            sum += sign * sgn_t * (logc + f1 + f2).exp();
        }
        sum
    }

    /// Mean of `P(t)^2` when `t` is the first coordinate of a uniform point on
    /// the unit sphere in `q` dimensions (density `~ (1-t^2)^{(q-3)/2}`).
    ///
    /// Exact: expands the square and integrates monomials with Beta functions.
    pub fn mean_square(&self) -> f64 {
        let beta = 0.5 * (self.q as f64 - 3.0);
        let k = self.s - self.r;
        let mut total = 0.0;
        for &(l1, s1, lc1, _) in &self.terms {
            for &(l2, s2, lc2, _) in &self.terms {
                // t^{2a} (1-t^2)^b
                let a = k - l1 - l2;
                let b = l1 + l2 + self.r;
                total += s1 * s2 * (lc1 + lc2 + ln_beta_moment(a, b, beta)).exp();
            }
        }
        total
    }
}

/// `ln E[t^{2a} (1-t^2)^b]` under the density `~ (1-t^2)^beta` on `[-1,1]`.
fn ln_beta_moment(a: usize, b: usize, beta: f64) -> f64 {
    // Gamma(a+1/2)/Gamma(1/2) * Gamma(b+beta+1)/Gamma(beta+1)
    //   * Gamma(beta+3/2)/Gamma(a+b+beta+3/2)
    let mut out = 0.0;
    for i in 0..a {
        out += (0.5 + i as f64).ln();
    }
    for i in 0..b {
        out += (beta + 1.0 + i as f64).ln();
    }
    out - ln_gamma_ratio_inv(beta + 1.5, (a + b) as f64)
}

/// Associated Legendre function of degree `s`, order `r` in `q` dimensions.
pub fn assoc_legendre_qdim(s: usize, r: usize, t: f64, q: usize) -> Result<f64> {
    if !(t.abs() <= 1.0) {
        return Err(Error::InvalidArgument(format!("|t| = {} > 1", t.abs())));
    }
    Ok(AssocLegendre::new(s, r, q)?.eval(t))
}

/// Pointwise `N -> inf` limit of `P_s^r(w / sqrt(2 N eps0); 3N - p)`.
pub fn legendre_limit(s: usize, r: usize, w: f64, eps0: f64) -> f64 {
    assert!(r <= s, "order exceeds degree");
    let k = s - r;
    let falling = factorial(s) / factorial(k);
    falling * 2f64.powf(-0.5 * k as f64) * hermite(k, (0.75 / eps0).sqrt() * w)
}

/// `|P_s^r(w/sqrt(2 N eps0); 3N-p) - limit|`.
pub fn asymptotic_error(
    s: usize,
    r: usize,
    w: f64,
    eps0: f64,
    p: usize,
    n_particles: usize,
) -> Result<f64> {
    let nf = n_particles as f64;
    if !(eps0 > 0.0) {
        return Err(Error::InvalidArgument("eps0 must be positive".into()));
    }
    if nf <= p as f64 / 3.0 || nf <= w * w / (2.0 * eps0) || 3 * n_particles <= p + 1 {
        return Err(Error::InvalidArgument(format!(
            "need N > max(p/3, w^2/(2 eps0)); N={n_particles}, p={p}, w={w}"
        )));
    }
    let t = w / (2.0 * nf * eps0).sqrt();
    let finite = assoc_legendre_qdim(s, r, t, 3 * n_particles - p)?;
    Ok((finite - legendre_limit(s, r, w, eps0)).abs())
}
