use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum NumericsError {
    #[error("quadrature tolerances must be positive and max_depth at least 1")]
    InvalidSpec,
    #[error("invalid integration interval [{lo}, {hi}]")]
    InvalidInterval { lo: f64, hi: f64 },
    #[error("integrand is not finite near {at}")]
    NonFinite { at: f64 },
    #[error("quadrature did not converge: estimate {estimate}, error bound {error_bound}")]
    NoConvergence { estimate: f64, error_bound: f64 },
    #[error("no sign change on [{lo}, {hi}]")]
    NoSignChange { lo: f64, hi: f64 },
}

impl NumericsError {
    pub fn best_estimate(&self) -> Option<f64> {
        match self {
            NumericsError::NoConvergence { estimate, .. } => Some(*estimate),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("kernel order must be a positive even integer, got {0}")]
    KernelOrder(usize),
    #[error("unknown density model {0}")]
    UnknownModel(u32),
    #[error("invalid mixture: {0}")]
    Mixture(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("functional must be positive, got {0}")]
    NonPositiveFunctional(f64),
    #[error("degenerate sample: {0}")]
    DegenerateSample(&'static str),
    #[error("no quantile root in [-6, 6] for kind {kind} at alpha {alpha}")]
    QuantileNotFound { kind: String, alpha: f64 },
    #[error("context lacks {field} required by kind {kind}")]
    MissingField { kind: String, field: &'static str },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
