//! Sampled densities on tensor grids with per-axis quadrature weights.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::quadrature::gauss_hermite_scaled;

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Axis {
    /// `bins` cells on `[lo, hi]`; nodes at cell midpoints, weight = width.
    pub fn bins(lo: f64, hi: f64, bins: usize) -> Self {
        let h = (hi - lo) / bins as f64;
        Axis {
            nodes: (0..bins).map(|i| lo + (i as f64 + 0.5) * h).collect(),
            weights: vec![h; bins],
        }
    }

    /// `count` equally spaced points `lo + i h` with spacing `h`; weights `h`.
    pub fn regular(lo: f64, h: f64, count: usize) -> Self {
        Axis {
            nodes: (0..count).map(|i| lo + i as f64 * h).collect(),
            weights: vec![h; count],
        }
    }

    /// Gauss–Hermite nodes matched to a Gaussian of given mean and variance.
    pub fn gauss_hermite(count: usize, mean: f64, var: f64) -> Self {
        let (nodes, weights) = gauss_hermite_scaled(count, mean, var);
        Axis { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Spacing if the nodes are equally spaced (relative tolerance 1e-9).
    pub fn spacing(&self) -> Option<f64> {
        if self.nodes.len() < 2 {
            return None;
        }
        let h = self.nodes[1] - self.nodes[0];
        let ok = self
            .nodes
            .windows(2)
            .all(|p| ((p[1] - p[0]) - h).abs() <= 1e-9 * h.abs());
        ok.then_some(h)
    }

    pub fn lo(&self) -> f64 {
        self.nodes[0]
    }

    pub fn hi(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }
}

/// A density sampled on the tensor product of `axes`, row-major with the last
/// axis fastest. `n` is the marginal order (number of velocities) the grid
/// describes; a full order-`n` grid has `3n` axes, projections have fewer.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub n: usize,
    pub axes: Vec<Axis>,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn zeros(n: usize, axes: Vec<Axis>) -> Self {
        let len = axes.iter().map(Axis::len).product();
        DensityGrid {
            n,
            axes,
            values: vec![0.0; len],
        }
    }

    /// Samples `f` at every grid point.
    pub fn from_fn<F: FnMut(&[f64]) -> f64>(n: usize, axes: Vec<Axis>, mut f: F) -> Self {
        let mut g = Self::zeros(n, axes);
        let mut x = vec![0.0; g.dim()];
        for flat in 0..g.values.len() {
            g.point_into(flat, &mut x);
            g.values[flat] = f(&x);
        }
        g
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        DensityGrid {
            n: self.n,
            axes: self.axes.clone(),
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Axis::len).collect()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let shape = self.shape();
        let mut s = vec![1; shape.len()];
        for a in (0..shape.len().saturating_sub(1)).rev() {
            s[a] = s[a + 1] * shape[a + 1];
        }
        s
    }

    pub fn unravel(&self, mut flat: usize, idx: &mut [usize]) {
        for a in (0..self.dim()).rev() {
            let len = self.axes[a].len();
            idx[a] = flat % len;
            flat /= len;
        }
    }

    pub fn point_into(&self, flat: usize, x: &mut [f64]) {
        let mut rem = flat;
        for a in (0..self.dim()).rev() {
            let len = self.axes[a].len();
            x[a] = self.axes[a].nodes[rem % len];
            rem /= len;
        }
    }

    pub fn weight(&self, flat: usize) -> f64 {
        let mut rem = flat;
        let mut w = 1.0;
        for a in (0..self.dim()).rev() {
            let len = self.axes[a].len();
            w *= self.axes[a].weights[rem % len];
            rem /= len;
        }
        w
    }

    /// Quadrature of `values * h(x)`.
    pub fn integrate_with<H: FnMut(&[f64]) -> f64>(&self, mut h: H) -> f64 {
        let mut x = vec![0.0; self.dim()];
        let mut acc = 0.0;
        for flat in 0..self.values.len() {
            self.point_into(flat, &mut x);
            acc += self.weight(flat) * self.values[flat] * h(&x);
        }
        acc
    }

    pub fn mass(&self) -> f64 {
        self.integrate_with(|_| 1.0)
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.values.iter_mut() {
            *v *= c;
        }
    }

    pub fn same_axes(&self, other: &DensityGrid) -> bool {
        self.axes == other.axes
    }

    /// Quadrature L1 distance between two grids on identical axes.
    pub fn l1_distance(&self, other: &DensityGrid) -> Result<f64> {
        if !self.same_axes(other) {
            return Err(Error::InvalidArgument("grids have different axes".into()));
        }
        Ok((0..self.len())
            .map(|i| self.weight(i) * (self.values[i] - other.values[i]).abs())
            .sum())
    }

    /// Marginal over all axes except `keep` (quadrature sum).
    pub fn marginal_axis(&self, keep: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes[keep].len()];
        let mut idx = vec![0; self.dim()];
        for flat in 0..self.len() {
            self.unravel(flat, &mut idx);
            let w_other: f64 = (0..self.dim())
                .filter(|&a| a != keep)
                .map(|a| self.axes[a].weights[idx[a]])
                .product();
            out[idx[keep]] += w_other * self.values[flat];
        }
        out
    }

    /// Writes the CSV layout: one `axis,<k>,nodes...` and one
    /// `weight,<k>,weights...` row per axis, a column header
    /// `v1,...,vD,value`, then one row per grid point. Floats carry 17
    /// significant digits.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        for (k, ax) in self.axes.iter().enumerate() {
            s.push_str(&format!("axis,{k}"));
            for x in &ax.nodes {
                s.push(',');
                s.push_str(&fmt17(*x));
            }
            s.push('\n');
            s.push_str(&format!("weight,{k}"));
            for x in &ax.weights {
                s.push(',');
                s.push_str(&fmt17(*x));
            }
            s.push('\n');
        }
        let cols: Vec<String> = (1..=self.dim()).map(|i| format!("v{i}")).collect();
        let _ = writeln!(s, "{},value", cols.join(","));
        let mut x = vec![0.0; self.dim()];
        for flat in 0..self.len() {
            self.point_into(flat, &mut x);
            for xi in &x {
                s.push_str(&fmt17(*xi));
                s.push(',');
            }
            s.push_str(&fmt17(self.values[flat]));
            s.push('\n');
        }
        s
    }

    pub fn from_csv_str(text: &str, n: usize) -> Result<Self> {
        let mut axes: Vec<Axis> = Vec::new();
        let mut lines = text.lines();
        let mut header_seen = false;
        for line in lines.by_ref() {
            let mut parts = line.split(',');
            match parts.next() {
                Some("axis") => {
                    let _k = parts.next();
                    let nodes = parts.map(parse_f64).collect::<Result<Vec<_>>>()?;
                    axes.push(Axis {
                        nodes,
                        weights: Vec::new(),
                    });
                }
                Some("weight") => {
                    let k: usize = parts
                        .next()
                        .and_then(|x| x.parse().ok())
                        .ok_or_else(|| Error::Parse("bad weight row".into()))?;
                    let w = parts.map(parse_f64).collect::<Result<Vec<_>>>()?;
                    let ax = axes
                        .get_mut(k)
                        .ok_or_else(|| Error::Parse("weight row before axis row".into()))?;
                    ax.weights = w;
                }
                Some(_) => {
                    header_seen = true;
                    break;
                }
                None => {}
            }
        }
        if !header_seen || axes.iter().any(|a| a.weights.len() != a.nodes.len()) {
            return Err(Error::Parse("malformed grid header".into()));
        }
        let mut values = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let last = line
                .rsplit(',')
                .next()
                .ok_or_else(|| Error::Parse("empty row".into()))?;
            values.push(parse_f64(last)?);
        }
        let g = DensityGrid::zeros(n, axes);
        if g.len() != values.len() {
            return Err(Error::Parse(format!(
                "expected {} rows, found {}",
                g.len(),
                values.len()
            )));
        }
        Ok(g.with_values(values))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn load_csv(path: &Path, n: usize) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?, n)
    }
}

/// 17 significant digits, round-trip exact.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("not a number: {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gaussian_mass_on_hermite_grid() {
        let ax = Axis::gauss_hermite(20, 0.3, 0.5);
        let g = DensityGrid::from_fn(1, vec![ax.clone(), ax.clone(), ax], |x| {
            let r2: f64 = x.iter().map(|v| (v - 0.3) * (v - 0.3)).sum();
            (-r2 / 1.0).exp() / (std::f64::consts::PI).powf(1.5)
        });
        assert!((g.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn marginal_axis_sums_out() {
        let g = DensityGrid::from_fn(1, vec![Axis::bins(0.0, 1.0, 4), Axis::bins(0.0, 2.0, 5)], |x| {
            x[0] + x[1]
        });
        let m = g.marginal_axis(0);
        for (i, mi) in m.iter().enumerate() {
            let x = g.axes[0].nodes[i];
            // int_0^2 (x + y) dy = 2x + 2
            assert!((mi - (2.0 * x + 2.0)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn csv_round_trip(vals in proptest::collection::vec(-1e3f64..1e3, 12)) {
            let g = DensityGrid::zeros(1, vec![Axis::bins(-1.0, 1.0, 3), Axis::gauss_hermite(4, 0.0, 1.0)])
                .with_values(vals);
            let back = DensityGrid::from_csv_str(&g.to_csv_string(), 1).unwrap();
            prop_assert_eq!(back, g);
        }
    }
}
