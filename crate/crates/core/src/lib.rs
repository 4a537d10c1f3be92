//! Gaussian-process marginal likelihoods and gradients from preconditioned
//! conjugate gradients and variance-reduced stochastic Lanczos quadrature.

pub mod error;
pub mod kernels;
pub mod krylov;
pub mod likelihood;
pub mod linalg;
pub mod optimizer;
pub mod oracle;
pub mod parallel;
pub mod preconditioners;
pub mod trace;

pub use error::{GpError, Result};
