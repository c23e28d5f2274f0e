use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MethError {
    #[error("x-degree {degree} exceeds cap {cap}; raise max_xdeg")]
    DegreeOverflow { degree: usize, cap: usize },
    #[error("exponential of a secular function (x-degree {degree})")]
    SecularExponent { degree: usize },
    #[error("mode {mode} is resonant with epsilon = {epsilon}")]
    ResonantMode { mode: i64, epsilon: f64 },
    #[error("function has zeros on the collocation grid")]
    NotInvertible,
    #[error("derivation order {order} exceeds cap {cap}")]
    DerivationOverflow { order: usize, cap: usize },
    #[error("no trusted Λ-band left after truncation ({0})")]
    BandOverflow(String),
    #[error("flow anomaly {anomaly:.3e} exceeds {tol:.1e}")]
    AnomalyExceeded { anomaly: f64, tol: f64 },
    #[error("field norm {0:.3e} blew up")]
    BlowUp(f64),
    #[error("time slice violation: {0}")]
    SliceViolation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, MethError>;
