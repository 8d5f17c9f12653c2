use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the analysis and continuation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no convergence: {what} (last increment {last_increment:e} at T = {at_time})")]
    NoConvergence {
        what: String,
        last_increment: f64,
        at_time: f64,
    },

    #[error("time {t} outside the grid window [0, {t_max}]")]
    OutOfRange { t: f64, t_max: f64 },

    #[error("step size underflow integrating the fundamental matrix on panel [{t0}, {t1}]")]
    Stiffness { t0: f64, t1: f64 },

    #[error("fundamental matrix ill-conditioned at t = {t} (condition number {cond:e})")]
    IllConditionedTransition { t: f64, cond: f64 },

    #[error("no dichotomy: {0}")]
    NoDichotomy(String),

    #[error("wrong branch: {0}")]
    WrongBranch(String),

    #[error("singular jacobian: {0}")]
    SingularJacobian(String),

    #[error("newton stalled at epsilon = {eps}: {reason}")]
    Stalled { eps: f64, reason: String },

    #[error("shooting oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config not found: {}", .0.display())]
    ConfigNotFound(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
