//! Run configuration: one JSON document, one section per library module.

use std::path::Path;

use kinsphere::markov::Scheme;
use kinsphere::model::{Vec3, TOL_CONSTRAINT};
use kinsphere::spectral::SeriesMode;
use kinsphere::{derive_params, SystemParams, VelocityState};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub run: RunCfg,
    pub model: ModelCfg,
    pub markov: MarkovCfg,
    pub spectral: SpectralCfg,
    pub fokker_planck: KineticCfg,
    pub specfun: AsymptoticsCfg,
    pub diagnostics: DiagnosticsCfg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunCfg {
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunCfg {
    fn default() -> Self {
        RunCfg {
            seed: 1,
            out_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelCfg {
    pub n_particles: usize,
    pub u0: Vec3,
    pub e0: f64,
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg {
            n_particles: 2,
            u0: [0.0; 3],
            e0: 1.5,
        }
    }
}

impl ModelCfg {
    pub fn params(&self) -> Result<SystemParams, ConfigError> {
        derive_params(self.u0, self.e0, self.n_particles).map_err(|e| ConfigError(format!("model: {e}")))
    }
}

/// Where trajectories (or the spectral initial datum) start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Start {
    Uniform {},
    /// One uniform draw from the run seed, shared by all trajectories.
    RandomPoint {},
    Point { v: Vec<Vec3> },
}

impl Start {
    pub fn point_state(&self, params: &SystemParams, seed: u64) -> Result<Option<VelocityState>, ConfigError> {
        match self {
            Start::Uniform {} => Ok(None),
            Start::RandomPoint {} => {
                let mut rng = kinsphere::rng::stream(seed, u64::MAX);
                Ok(Some(kinsphere::geometry::sample_uniform(params, &mut rng)))
            }
            Start::Point { v } => {
                let s = VelocityState::new(v.clone(), *params).map_err(|e| ConfigError(format!("start: {e}")))?;
                if !s.satisfies_constraints(TOL_CONSTRAINT) {
                    return bad("start: point is not on the manifold of the model section");
                }
                Ok(Some(s))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarkovCfg {
    pub scheme: Scheme,
    pub n_traj: usize,
    pub checkpoints: Vec<f64>,
    /// `null` selects the library default step.
    pub dtau: Option<f64>,
    pub start: Start,
    pub histogram_bins: usize,
    /// `null` means five Maxwellian standard deviations.
    pub histogram_half_width: Option<f64>,
    pub pair_histogram_bins: usize,
    pub conservation_tol: f64,
    pub stationarity_tol: f64,
}

impl Default for MarkovCfg {
    fn default() -> Self {
        MarkovCfg {
            scheme: Scheme::ProjectedEm,
            n_traj: 1000,
            checkpoints: vec![0.2, 1.0],
            dtau: None,
            start: Start::Uniform {},
            histogram_bins: 16,
            histogram_half_width: None,
            pair_histogram_bins: 16,
            conservation_tol: 1e-10,
            stationarity_tol: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralCfg {
    pub mode: SeriesMode,
    /// Marginal order.
    pub n: usize,
    #[serde(rename = "J")]
    pub truncation: usize,
    pub taus: Vec<f64>,
    pub start: Start,
    pub grid_points: usize,
    /// Largest degree listed in the spectrum table.
    pub table_degree: usize,
    pub mass_tol: f64,
}

impl Default for SpectralCfg {
    fn default() -> Self {
        SpectralCfg {
            mode: SeriesMode::FiniteN,
            n: 1,
            truncation: 6,
            taus: vec![0.2, 1.0],
            start: Start::RandomPoint {},
            grid_points: 12,
            table_degree: 20,
            mass_tol: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KineticCfg {
    pub times: Vec<f64>,
    pub nodes: usize,
    /// Initial mean offset from `u0`.
    pub shift: Vec3,
    /// Initial temperature in units of the equilibrium temperature.
    pub temperature_ratio: f64,
    pub moment_tol: f64,
    pub mass_tol: f64,
}

impl Default for KineticCfg {
    fn default() -> Self {
        KineticCfg {
            times: vec![0.1, 1.0, 5.0],
            nodes: 24,
            shift: [0.5, 0.0, 0.0],
            temperature_ratio: 1.0,
            moment_tol: 1e-6,
            mass_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsymptoticsCfg {
    pub s_max: usize,
    pub p: Vec<usize>,
    pub n_particles: Vec<usize>,
    pub w_max: f64,
    pub w_points: usize,
    pub expected_slope: f64,
    pub slope_tol: f64,
}

impl Default for AsymptoticsCfg {
    fn default() -> Self {
        AsymptoticsCfg {
            s_max: 4,
            p: vec![3, 4],
            n_particles: vec![400, 1600, 6400],
            w_max: 2.0,
            w_points: 9,
            expected_slope: -0.5,
            slope_tol: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    Mean,
    Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsCfg {
    /// Output directory of an earlier `simulate` run.
    pub input_dir: Option<String>,
    pub observable: Observable,
    pub component: usize,
    /// `null` uses the equilibrium value.
    pub limit: Option<f64>,
    /// `null` uses the eigenvalue of the matching degree.
    pub expected_rate: Option<f64>,
    /// Relative tolerance on the fitted rate.
    pub rate_tol: f64,
    pub conservation_tol: f64,
}

impl Default for DiagnosticsCfg {
    fn default() -> Self {
        DiagnosticsCfg {
            input_dir: None,
            observable: Observable::Mean,
            component: 0,
            limit: None,
            expected_rate: None,
            rate_tol: 0.05,
            conservation_tol: 1e-10,
        }
    }
}

/// Sets `a.b.c = value` inside a JSON object, creating objects on the way.
/// The value is parsed as JSON when possible and kept as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = match assignment.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => (k.trim(), v),
        _ => return bad(format!("--set expects key=value, got {assignment:?}")),
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = doc;
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            _ => return bad(format!("--set {key}: {} is not an object", parts[..i].join("."))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!()
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config, ConfigError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !doc.is_object() {
        return bad("config must be a JSON object");
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: Config = serde_json::from_value(doc).map_err(|e| ConfigError(e.to_string()))?;
    cfg.model.params()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: Config = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<Config>(r#"{"markov": {"ntraj": 3}}"#).is_err());
        assert!(serde_json::from_str::<Config>(r#"{"extra": {}}"#).is_err());
        assert!(serde_json::from_str::<Config>(r#"{"markov": {"start": {"kind": "uniform", "x": 1}}}"#).is_err());
    }

    #[test]
    fn overrides_nest_and_parse() {
        let mut doc = serde_json::json!({"model": {"n_particles": 2}});
        apply_override(&mut doc, "model.n_particles=8").unwrap();
        apply_override(&mut doc, "markov.scheme=pair_rotation").unwrap();
        apply_override(&mut doc, "markov.checkpoints=[0.5]").unwrap();
        let cfg: Config = serde_json::from_value(doc).unwrap();
        assert_eq!(cfg.model.n_particles, 8);
        assert_eq!(cfg.markov.scheme, Scheme::PairRotation);
        assert_eq!(cfg.markov.checkpoints, vec![0.5]);
        assert!(apply_override(&mut serde_json::json!({}), "novalue").is_err());
    }
}
