use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid cost: {0}")]
    InvalidCost(String),

    #[error("point {value} is outside the open interval ({lo}, {hi})")]
    Domain { value: f64, lo: f64, hi: f64 },

    #[error("integration on [{lo}, {hi}] did not converge (estimate {estimate:e}, error {error:e})")]
    Integration {
        lo: f64,
        hi: f64,
        estimate: f64,
        error: f64,
    },

    #[error("integrand is not finite at {at}")]
    NonFinite { at: f64 },

    #[error("root finding failed: {0}")]
    Root(String),

    #[error("ode integration failed at {at}: {reason}")]
    Ode { at: f64, reason: String },

    #[error("{what} = {value} is outside the tabulated range [{lo}, {hi}]")]
    OutOfTable {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
