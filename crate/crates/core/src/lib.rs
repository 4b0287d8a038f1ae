//! Gaussian-process estimators for borrowing nonconcurrent controls in
//! platform trials.

pub mod analysis;
pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod glm_gp;
pub mod gp_multi;
pub mod gp_single;
pub mod hyperfit;
pub mod kernels;
pub mod linalg;
pub mod rng;
pub mod simharness;
pub mod simplex;

pub use error::{GpError, Result};
