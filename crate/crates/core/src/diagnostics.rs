//! Cross-checks over simulation and series outputs: conservation, chaos,
//! exponential-rate fits and convergence orders, plus a flat JSON report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::{EnsembleRun, EnsembleStats};
use crate::model::{manifold_residuals, norm2, SystemParams, VelocityState};

/// One checked quantity, serialized as `{metric, value, stderr, tolerance, pass}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Report {
    /// Passes when `|value - expected| <= tolerance`.
    pub fn within(metric: &str, value: f64, stderr: f64, expected: f64, tolerance: f64) -> Self {
        Report {
            metric: metric.to_string(),
            value,
            stderr,
            tolerance,
            pass: (value - expected).abs() <= tolerance,
        }
    }

    /// Passes when `value < bound`.
    pub fn below(metric: &str, value: f64, stderr: f64, bound: f64) -> Self {
        Report {
            metric: metric.to_string(),
            value,
            stderr,
            tolerance: bound,
            pass: value < bound,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDrift {
    pub tau: f64,
    pub max_momentum: f64,
    pub max_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConservationReport {
    pub per_checkpoint: Vec<CheckpointDrift>,
    /// Largest `(momentum, energy)` residual of each trajectory over the run.
    pub per_trajectory: Vec<(f64, f64)>,
    pub max_momentum: f64,
    pub max_energy: f64,
}

impl ConservationReport {
    fn from_table(taus: &[f64], table: &[Vec<(f64, f64)>]) -> Result<Self> {
        if table.len() < 2 {
            return Err(Error::InvalidArgument("need at least 2 checkpoints".into()));
        }
        let n_traj = table[0].len();
        let mut per_trajectory = vec![(0.0f64, 0.0f64); n_traj];
        let mut per_checkpoint = Vec::with_capacity(table.len());
        for (tau, row) in taus.iter().zip(table) {
            let mut d = CheckpointDrift {
                tau: *tau,
                max_momentum: 0.0,
                max_energy: 0.0,
            };
            for (t, &(m, e)) in per_trajectory.iter_mut().zip(row) {
                t.0 = t.0.max(m);
                t.1 = t.1.max(e);
                d.max_momentum = d.max_momentum.max(m);
                d.max_energy = d.max_energy.max(e);
            }
            per_checkpoint.push(d);
        }
        let max_momentum = per_checkpoint.iter().map(|d| d.max_momentum).fold(0.0, f64::max);
        let max_energy = per_checkpoint.iter().map(|d| d.max_energy).fold(0.0, f64::max);
        Ok(ConservationReport {
            per_checkpoint,
            per_trajectory,
            max_momentum,
            max_energy,
        })
    }

    /// From the step-by-step residual tracking of an ensemble run.
    pub fn from_run(run: &EnsembleRun) -> Result<Self> {
        let taus: Vec<f64> = run.stats.iter().map(|s| s.tau).collect();
        Self::from_table(&taus, &run.residuals)
    }
}

/// Momentum and energy drift of stored states, indexed
/// `[checkpoint][trajectory]`, sampled only at the checkpoints.
pub fn conservation_report(taus: &[f64], checkpoints: &[Vec<VelocityState>]) -> Result<ConservationReport> {
    if taus.len() != checkpoints.len() {
        return Err(Error::InvalidArgument("one time per checkpoint required".into()));
    }
    let table: Vec<Vec<(f64, f64)>> = checkpoints
        .iter()
        .map(|row| {
            row.iter()
                .map(|s| {
                    let (dp, de) = manifold_residuals(s);
                    (norm2(&dp).sqrt(), de.abs())
                })
                .collect()
        })
        .collect();
    ConservationReport::from_table(taus, &table)
}

/// Largest `|mean_c - u0_c| / stderr_c` over checkpoints and components; a
/// stationary ensemble keeps this below about 3.
pub fn stationarity_score(stats: &[EnsembleStats], params: &SystemParams) -> f64 {
    let mut worst: f64 = 0.0;
    for s in stats {
        for c in 0..3 {
            if s.mean_stderr[c] > 0.0 {
                worst = worst.max((s.mean[c] - params.u0[c]).abs() / s.mean_stderr[c]);
            }
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosMetric {
    pub pair_cov: [[f64; 3]; 3],
    pub pair_cov_stderr: [[f64; 3]; 3],
    /// L1 distance between the `(v_11, v_21)` histogram and the product of
    /// its two one-dimensional marginals.
    pub l1_product_defect: f64,
}

/// `-2 eps0 / (3 (N - 1))`.
pub fn uniform_pair_covariance(params: &SystemParams) -> f64 {
    -2.0 * params.eps0 / (3.0 * (params.n_particles as f64 - 1.0))
}

pub fn chaos_metric(stats: &EnsembleStats, _params: &SystemParams) -> Result<ChaosMetric> {
    let h = stats
        .pair_histogram
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("pair histogram was not recorded".into()))?;
    if h.dim() != 2 {
        return Err(Error::InvalidArgument("pair histogram must be 2D".into()));
    }
    let m0 = h.marginal_axis(0);
    let m1 = h.marginal_axis(1);
    let (b0, b1) = (h.axes[0].len(), h.axes[1].len());
    let mut defect = 0.0;
    for i in 0..b0 {
        for j in 0..b1 {
            let flat = i * b1 + j;
            defect += h.weight(flat) * (h.values[flat] - m0[i] * m1[j]).abs();
        }
    }
    Ok(ChaosMetric {
        pair_cov: stats.pair_cov,
        pair_cov_stderr: stats.pair_cov_stderr,
        l1_product_defect: defect,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub rate: f64,
    pub stderr: f64,
    pub points_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slope {
    pub slope: f64,
    pub stderr: f64,
}

/// Ordinary least squares `y = a + b x`; returns `(b, stderr(b))`.
fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    if x.len() <= 2 {
        return (b, 0.0);
    }
    let rss: f64 = x.iter().zip(y).map(|(xi, yi)| (yi - a - b * xi).powi(2)).sum();
    (b, (rss / (n - 2.0) / sxx).sqrt())
}

/// Exponential rate of `|value - limit|` from `(tau, value, noise)` triples.
///
/// Only points whose residual exceeds ten times their noise level enter the
/// log-linear least-squares fit; at least 10 points are required there, and
/// the residual must keep one sign inside the window.
pub fn gap_estimate(series: &[(f64, f64, f64)], expected_limit: f64) -> Result<RateFit> {
    if series.len() < 10 {
        return Err(Error::FitRejected(format!(
            "need at least 10 time points, got {}",
            series.len()
        )));
    }
    let window: Vec<&(f64, f64, f64)> = series
        .iter()
        .filter(|(_, v, noise)| (v - expected_limit).abs() > 10.0 * noise.abs())
        .collect();
    if window.len() < 10 {
        return Err(Error::FitRejected(format!(
            "only {} points above the noise floor",
            window.len()
        )));
    }
    let sign = (window[0].1 - expected_limit).signum();
    if window.iter().any(|(_, v, _)| (v - expected_limit).signum() != sign) {
        return Err(Error::FitRejected(
            "residual changes sign; series is noise dominated".into(),
        ));
    }
    let x: Vec<f64> = window.iter().map(|p| p.0).collect();
    let y: Vec<f64> = window.iter().map(|p| (p.1 - expected_limit).abs().ln()).collect();
    let (b, se) = ols(&x, &y);
    Ok(RateFit {
        rate: -b,
        stderr: se,
        points_used: window.len(),
    })
}

/// Log-log slope of `(scale, error)` pairs. Errors must be positive and move
/// monotonically with scale; a reversal larger than `noise_rel` (relative) is
/// rejected rather than fitted.
pub fn convergence_order(pairs: &[(f64, f64)], noise_rel: f64) -> Result<Slope> {
    if pairs.len() < 3 {
        return Err(Error::FitRejected("need at least 3 scales".into()));
    }
    if pairs.iter().any(|&(s, e)| !(s > 0.0) || !(e > 0.0)) {
        return Err(Error::FitRejected("scales and errors must be positive".into()));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let first = sorted[0].1;
    let last = sorted[sorted.len() - 1].1;
    let decreasing = last < first;
    for w in sorted.windows(2) {
        let (a, b) = (w[0].1, w[1].1);
        let reversed = if decreasing { b > a * (1.0 + noise_rel) } else { b < a * (1.0 - noise_rel) };
        if reversed {
            return Err(Error::FitRejected(format!(
                "errors are not monotone in scale: {sorted:?}"
            )));
        }
    }
    let x: Vec<f64> = sorted.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = sorted.iter().map(|p| p.1.ln()).collect();
    let (slope, stderr) = ols(&x, &y);
    Ok(Slope { slope, stderr })
}
