use thiserror::Error;

/// Errors raised by model construction, simulation and the numerical solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}` = {value}: {constraint}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        constraint: String,
    },

    #[error("{what}: argument {value} outside domain ({constraint})")]
    Domain {
        what: &'static str,
        value: f64,
        constraint: String,
    },

    #[error("non-finite velocity {value} at previous sojourn T = {prev}, elapsed t = {at}")]
    NonFiniteVelocity { prev: f64, at: f64, value: f64 },

    #[error("quadrature failed on [{lower}, {upper}]: {reason}")]
    Quadrature {
        lower: f64,
        upper: f64,
        reason: String,
    },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("moment of order {order} is not finite: {constraint}")]
    MomentNotFinite { order: usize, constraint: String },

    #[error("martingale condition violated: {0}")]
    ConditionViolated(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("{0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn positive(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            constraint: "must be finite and > 0".into(),
        })
    }
}

pub(crate) fn finite(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            constraint: "must be finite".into(),
        })
    }
}
