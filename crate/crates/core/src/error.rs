use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient data: need at least {need} observations, got {got}")]
    InsufficientData { need: usize, got: usize },

    #[error("skew-normal moment fit infeasible: m1={m1}, m2={m2}, m3={m3}, omega2={omega2}, delta={delta}")]
    FitInfeasible {
        m1: f64,
        m2: f64,
        m3: f64,
        omega2: f64,
        delta: f64,
    },

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("combined evidence below threshold: sum_z={sum_z} < z_alpha*sqrt(k)={threshold}")]
    BelowThreshold { sum_z: f64, threshold: f64 },

    #[error("no sign change on bracket [{lo}, {hi}]")]
    NoBracket { lo: f64, hi: f64 },

    #[error("line {line}: {message}")]
    Ingest { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        Error::Ingest {
            line,
            message: e.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
