//! Ensemble Kalman filtering kernels: forecast models, observation
//! operators, the EnKF / ETKF / EAKF analysis steps, long-time stability
//! diagnostics and matrix perturbation tools.

pub mod diagnostics;
pub mod error;
pub mod filters;
pub mod models;
pub mod numerics;
pub mod observations;
pub mod perturbation;
pub mod rng;

pub use error::{Error, Result};
