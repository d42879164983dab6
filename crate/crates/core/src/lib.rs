//! Fluid and Gaussian approximations for the `G_t/M/s_t+GI` many-server
//! queue with time-varying arrivals and staffing, and an exact
//! discrete-event simulator of the same system used to check them.

// `!(x > 0.0)` is used on purpose so that NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod approx;
pub mod compare;
pub mod error;
pub mod fluid;
pub mod gaussian;
pub mod model;
pub mod numerics;
pub mod sim;
pub mod table;

pub use error::{Error, Result};
pub use model::{h2_from_scv, hazard, validate, ModelSpec, PatienceDist, SmoothFn};
