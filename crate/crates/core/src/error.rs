use thiserror::Error;

use crate::model::ValidationReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(ValidationReport),

    #[error("config error: {0}")]
    Config(String),

    #[error("H2 requires scv ≥ 1 (got {0})")]
    ScvBelowOne(f64),

    #[error("patience support exhausted at x = {0}")]
    PatienceExhausted(f64),

    #[error("staffing infeasible in OL interval [{start}, {end}]: b(t,0) = {rate} at t = {at}")]
    InfeasibleStaffing {
        start: f64,
        end: f64,
        at: f64,
        rate: f64,
    },

    #[error("non-isolated critical loading near t = {0}")]
    CriticalLoading(f64),

    #[error("queue boundary density vanished at t = {0}")]
    BoundaryDensityVanished(f64),

    #[error("refined terms not specified (lambda_g / staffing_g)")]
    RefinedTermsMissing,

    #[error("{0} is not continuously differentiable at t = {1}")]
    NotSmooth(&'static str, f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
