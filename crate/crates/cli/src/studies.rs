//! The five subcommands.

use std::f64::consts::PI;
use std::path::Path;

use kinsphere::diagnostics::{
    chaos_metric, convergence_order, gap_estimate, stationarity_score, ConservationReport, Report,
};
use kinsphere::fokker_planck::{functionals, moment_flow, propagate, relative_entropy, MomentState};
use kinsphere::grid::{fmt17, Axis, DensityGrid};
use kinsphere::markov::{simulate_ensemble, EnsembleConfig, EnsembleStats, HistogramSpec, InitialCondition, Scheme};
use kinsphere::model::Vec3;
use kinsphere::specfun::asymptotic_error;
use kinsphere::spectral::{
    degeneracy, eigenvalue, limit_eigenvalue, multi_index_set, sphere2_average, CoefficientMethod, InitialData,
    LimitMode, SeriesEvaluator, SeriesMode, SpectralExpansion,
};
use kinsphere::SystemParams;
use serde::{Deserialize, Serialize};

use crate::config::{Config, ConfigError, Observable, Start};
use crate::output::Artifacts;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Lib(#[from] kinsphere::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// Library rejections of configured values count as configuration errors.
    pub fn exit_code(&self) -> u8 {
        use kinsphere::Error as E;
        match self {
            RunError::Config(_) => 2,
            RunError::Lib(
                E::InvalidArgument(_)
                | E::NonPositiveStep(_)
                | E::GridTooCoarse { .. }
                | E::TooFewParticles(_)
                | E::DegenerateManifold { .. }
                | E::ParticleCountMismatch { .. },
            ) => 2,
            _ => 1,
        }
    }
}

type Res = Result<(), RunError>;

/// Saved by `simulate`, read back by `report`.
#[derive(Debug, Serialize, Deserialize)]
pub struct EnsembleDoc {
    pub params: SystemParams,
    pub scheme: Scheme,
    pub dtau: f64,
    pub steps: Vec<usize>,
    pub stats: Vec<EnsembleStats>,
}

pub fn simulate(cfg: &Config, out: &mut Artifacts) -> Res {
    let p = cfg.model.params()?;
    let m = &cfg.markov;
    let mut ec = EnsembleConfig::new(&p, m.scheme, m.n_traj, m.checkpoints.clone(), cfg.run.seed);
    if let Some(d) = m.dtau {
        ec.dtau = d;
    }
    if let Some(s) = m.start.point_state(&p, cfg.run.seed)? {
        ec.initial = InitialCondition::Point(s);
    }
    let half_width = m.histogram_half_width.unwrap_or(5.0 * p.temperature().sqrt());
    if m.histogram_bins > 0 {
        ec.histogram = Some(HistogramSpec {
            bins: m.histogram_bins,
            half_width,
        });
    }
    if m.pair_histogram_bins > 0 {
        ec.pair_histogram = Some(HistogramSpec {
            bins: m.pair_histogram_bins,
            half_width,
        });
    }
    let run = simulate_ensemble(&p, &ec)?;

    let header = [
        "tau", "steps", "samples", "mean_x", "mean_y", "mean_z", "mean_stderr_x", "mean_stderr_y", "mean_stderr_z",
        "var_x", "var_y", "var_z", "var_stderr_x", "var_stderr_y", "var_stderr_z", "pair_cov_xx", "pair_cov_yy",
        "pair_cov_zz", "pair_cov_stderr_xx", "pair_cov_stderr_yy", "pair_cov_stderr_zz", "max_momentum_residual",
        "max_energy_residual",
    ];
    let rows: Vec<Vec<f64>> = run
        .stats
        .iter()
        .zip(&run.steps)
        .map(|(s, &k)| {
            let mut r = vec![s.tau, k as f64, s.sample_count as f64];
            r.extend(s.mean);
            r.extend(s.mean_stderr);
            r.extend(s.variance);
            r.extend(s.variance_stderr);
            r.extend((0..3).map(|a| s.pair_cov[a][a]));
            r.extend((0..3).map(|a| s.pair_cov_stderr[a][a]));
            r.push(s.max_momentum_residual);
            r.push(s.max_energy_residual);
            r
        })
        .collect();
    out.csv("stats.csv", &header, &rows)?;
    for (c, s) in run.stats.iter().enumerate() {
        if let Some(h) = &s.histogram {
            out.grid(&format!("marginal_{c}.csv"), h)?;
        }
        if let Some(h) = &s.pair_histogram {
            out.grid(&format!("pair_marginal_{c}.csv"), h)?;
        }
    }

    let cons = ConservationReport::from_run(&run)?;
    out.json("conservation.json", &cons)?;
    if ec.pair_histogram.is_some() {
        let chaos = run
            .stats
            .iter()
            .map(|s| chaos_metric(s, &p))
            .collect::<kinsphere::Result<Vec<_>>>()?;
        out.json("chaos.json", &chaos)?;
    }
    out.json(
        "ensemble.json",
        &EnsembleDoc {
            params: p,
            scheme: run.scheme,
            dtau: run.dtau,
            steps: run.steps.clone(),
            stats: run.stats.clone(),
        },
    )?;

    let drift = cons.max_momentum.max(cons.max_energy);
    out.check(Report::below("conservation", drift, 0.0, m.conservation_tol));
    if m.start == (Start::Uniform {}) {
        out.check(Report::below("stationarity", stationarity_score(&run.stats, &p), 0.0, m.stationarity_tol));
    }
    Ok(())
}

pub fn spectral(cfg: &Config, out: &mut Artifacts) -> Res {
    let p = cfg.model.params()?;
    let s = &cfg.spectral;

    let mut rows = Vec::new();
    for j in 0..=s.table_degree {
        rows.push(vec![
            j.to_string(),
            fmt17(eigenvalue(j, p.n_particles, p.eps0)),
            fmt17(limit_eigenvalue(j, p.eps0)),
            degeneracy(j, p.n_particles).to_string(),
        ]);
    }
    out.csv_text("spectrum.csv", &["j", "eigenvalue", "limit_eigenvalue", "degeneracy"], &rows)?;

    let start = s.start.point_state(&p, cfg.run.seed)?;
    let expansion = match (&start, s.mode) {
        (None, _) => SpectralExpansion::ground(&p, s.n, s.truncation),
        (Some(state), SeriesMode::FiniteN) => {
            let method = CoefficientMethod::MonteCarlo {
                samples: 2,
                seed: cfg.run.seed,
            };
            SpectralExpansion::from_initial(&InitialData::Dirac(state), &p, s.n, s.truncation, method)?
        }
        (Some(state), SeriesMode::Limit) => {
            if s.n > p.n_particles {
                return Err(ConfigError(format!("spectral.n = {} exceeds N", s.n)).into());
            }
            let block = &state.v[..s.n];
            let mut e = SpectralExpansion::ground(&p, s.n, s.truncation);
            for j in 1..=s.truncation {
                for idx in multi_index_set(j, s.n) {
                    let g = LimitMode::new(&idx, &p);
                    e.entries.push(kinsphere::spectral::ExpansionEntry {
                        coeff: g.ratio(block) / g.norm_squared(),
                        m: idx.m,
                    });
                }
            }
            e
        }
    };
    out.json("expansion.json", &expansion)?;
    let series = SeriesEvaluator::new(&expansion, s.mode)?;

    let on_sphere = s.mode == SeriesMode::FiniteN && p.n_particles == 2;
    for (k, &tau) in s.taus.iter().enumerate() {
        let mass = if on_sphere {
            // density relative to the uniform law, tabulated over the v_1 sphere
            let mut rows = Vec::new();
            let r = p.radius();
            let mass = sphere2_average(&p, s.grid_points.max(s.truncation + 1), |state, y| {
                let f = series.eval(tau, &state.v[..1]);
                rows.push(vec![y[0] / r, y[2].atan2(y[1]).rem_euclid(2.0 * PI), f]);
                f
            });
            out.csv(&format!("sphere_{k}.csv"), &["cos_theta", "phi", "density"], &rows)?;
            mass
        } else {
            let axes: Vec<Axis> = (0..3 * s.n)
                .map(|a| Axis::gauss_hermite(s.grid_points, p.u0[a % 3], p.temperature()))
                .collect();
            let (g, _) = series.on_grid(tau, axes);
            out.grid(&format!("marginal_{k}.csv"), &g)?;
            g.mass()
        };
        out.check(Report::within(&format!("mass_tau_{k}"), mass, 0.0, 1.0, s.mass_tol));
    }
    Ok(())
}

fn gaussian(x: &[f64], mean: &Vec3, var: f64) -> f64 {
    let d2: f64 = (0..3).map(|c| (x[c] - mean[c]).powi(2)).sum();
    (2.0 * PI * var).powf(-1.5) * (-0.5 * d2 / var).exp()
}

pub fn kinetic(cfg: &Config, out: &mut Artifacts) -> Res {
    let p = cfg.model.params()?;
    let k = &cfg.fokker_planck;
    let (u, t_eq) = (p.u0, p.temperature());
    let axes: Vec<Axis> = (0..3).map(|c| Axis::gauss_hermite(k.nodes, u[c], t_eq)).collect();
    let mean = [u[0] + k.shift[0], u[1] + k.shift[1], u[2] + k.shift[2]];
    let f0 = DensityGrid::from_fn(1, axes, |x| gaussian(x, &mean, t_eq * k.temperature_ratio));
    let init = functionals(&f0);

    let mut rows = Vec::new();
    let (mut moment_err, mut mass_err): (f64, f64) = (0.0, 0.0);
    for (i, &t) in k.times.iter().enumerate() {
        let f = propagate(&f0, t, &u, t_eq)?;
        let got = functionals(&f);
        let want = moment_flow(&init, &u, t_eq, t)?;
        let flat = |s: &MomentState| vec![s.m, s.p[0], s.p[1], s.p[2], s.e];
        for (a, b) in flat(&got).iter().zip(flat(&want)) {
            moment_err = moment_err.max((a - b).abs());
        }
        mass_err = mass_err.max((got.m - init.m).abs());
        let mut r = vec![t];
        r.extend(flat(&got));
        r.extend(flat(&want));
        r.push(relative_entropy(&f, &p)?);
        rows.push(r);
        out.grid(&format!("density_{i}.csv"), &f)?;
    }
    out.csv(
        "moments.csv",
        &[
            "t", "m", "p_x", "p_y", "p_z", "e", "m_flow", "p_x_flow", "p_y_flow", "p_z_flow", "e_flow",
            "relative_entropy",
        ],
        &rows,
    )?;
    out.check(Report::below("moment_flow", moment_err, 0.0, k.moment_tol));
    out.check(Report::below("mass_defect", mass_err, 0.0, k.mass_tol));
    Ok(())
}

pub fn asymptotics(cfg: &Config, out: &mut Artifacts) -> Res {
    let p = cfg.model.params()?;
    let a = &cfg.specfun;
    if a.w_points < 2 {
        return Err(ConfigError("specfun.w_points must be at least 2".into()).into());
    }
    let ws: Vec<f64> = (0..a.w_points)
        .map(|i| -a.w_max + 2.0 * a.w_max * i as f64 / (a.w_points - 1) as f64)
        .collect();
    let mut rows = Vec::new();
    let mut worst = Vec::new();
    for &n in &a.n_particles {
        let mut e_max: f64 = 0.0;
        for s in 0..=a.s_max {
            for r in 0..=s {
                for &q in &a.p {
                    for &w in &ws {
                        let e = asymptotic_error(s, r, w, p.eps0, q, n)?;
                        e_max = e_max.max(e);
                        rows.push(vec![n as f64, s as f64, r as f64, q as f64, w, e]);
                    }
                }
            }
        }
        worst.push(vec![n as f64, e_max]);
    }
    out.csv("asymptotics.csv", &["n_particles", "s", "r", "p", "w", "error"], &rows)?;
    out.csv("asymptotics_max.csv", &["n_particles", "max_error"], &worst)?;
    let pairs: Vec<(f64, f64)> = worst.iter().map(|r| (r[0], r[1])).collect();
    let report = match convergence_order(&pairs, 0.05) {
        Ok(s) => Report::within("legendre_hermite_slope", s.slope, s.stderr, a.expected_slope, a.slope_tol),
        Err(_) => Report::within("legendre_hermite_slope", f64::NAN, f64::NAN, a.expected_slope, a.slope_tol),
    };
    out.json("slope.json", &report)?;
    out.check(report);
    Ok(())
}

pub fn report(cfg: &Config, out: &mut Artifacts) -> Res {
    let d = &cfg.diagnostics;
    let dir = d
        .input_dir
        .as_ref()
        .ok_or_else(|| ConfigError("diagnostics.input_dir is required for report".into()))?;
    let path = Path::new(dir).join("ensemble.json");
    let text = std::fs::read_to_string(&path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let doc: EnsembleDoc =
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    if d.component > 2 {
        return Err(ConfigError("diagnostics.component must be 0, 1 or 2".into()).into());
    }
    let p = doc.params;
    let c = d.component;
    let (series, limit, rate): (Vec<(f64, f64, f64)>, f64, f64) = match d.observable {
        Observable::Mean => (
            doc.stats.iter().map(|s| (s.tau, s.mean[c], s.mean_stderr[c])).collect(),
            p.u0[c],
            eigenvalue(1, p.n_particles, p.eps0),
        ),
        Observable::Variance => (
            doc.stats.iter().map(|s| (s.tau, s.variance[c], s.variance_stderr[c])).collect(),
            p.temperature(),
            eigenvalue(2, p.n_particles, p.eps0),
        ),
    };
    let limit = d.limit.unwrap_or(limit);
    let rate = d.expected_rate.unwrap_or(rate);
    let tol = d.rate_tol * rate;
    let gap = match gap_estimate(&series, limit) {
        Ok(f) => Report::within("relaxation_rate", f.rate, f.stderr, rate, tol),
        Err(_) => Report::within("relaxation_rate", f64::NAN, f64::NAN, rate, tol),
    };
    out.check(gap);
    let drift = doc
        .stats
        .iter()
        .map(|s| s.max_momentum_residual.max(s.max_energy_residual))
        .fold(0.0, f64::max);
    out.check(Report::below("conservation", drift, 0.0, d.conservation_tol));
    let checks = out.checks.clone();
    out.json("reports.json", &checks)?;
    Ok(())
}
