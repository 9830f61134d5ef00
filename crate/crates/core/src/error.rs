use thiserror::Error;

/// Errors raised by the numerical layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("need at least 2 particles, got {0}")]
    TooFewParticles(usize),

    #[error("degenerate manifold: e0 = {e0} must exceed |u0|^2/2 = {half_u2}")]
    DegenerateManifold { e0: f64, half_u2: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state has {got} particles, parameters expect {expected}")]
    ParticleCountMismatch { expected: usize, got: usize },

    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),

    #[error("grid too coarse: spacing {spacing} exceeds {limit}")]
    GridTooCoarse { spacing: f64, limit: f64 },

    #[error("fit rejected: {0}")]
    FitRejected(String),

    #[error("i/o: {0}")]
    Io(String),

    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
