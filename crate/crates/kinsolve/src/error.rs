use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Error)]
pub enum KinError {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("input outside domain: {0}")]
    Domain(String),

    #[error("evaluation on a piece boundary: {0}")]
    PieceBoundary(String),

    #[error("system validation failed:\n{0}")]
    Validation(crate::system::ValidationReport),

    #[error("degenerate transition Jacobian in rule {rule} on y-segment [{seg_lo}, {seg_hi}]: |dphi/dx| < {floor}")]
    DegenerateJacobian {
        rule: usize,
        seg_lo: f64,
        seg_hi: f64,
        floor: f64,
    },

    #[error("stale coefficient cache: {0}")]
    StaleCache(String),

    #[error("malformed coefficient cache: {0}")]
    CacheFormat(String),

    #[error("correction factor singular: loss quadrature {loss:e} below threshold while gain quadrature {gain:e} is active")]
    Singular { gain: f64, loss: f64 },

    #[error("solution blew up at t = {t}: non-finite coefficient in subsystem {subsystem}")]
    BlowUp { t: f64, subsystem: usize },

    #[error("metric input mismatch: {0}")]
    MetricInput(String),

    #[error("system file error: {0}")]
    SystemFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KinError>;
