//! Preconditioned conjugate gradients with Lanczos tridiagonal recovery.

mod cg;
mod tridiag;

pub use cg::{batched_pcg, pcg_solve, CgConfig, CgResult, IdentityPreconditioner, Preconditioner};
pub use tridiag::{SymTridiagonal, TridiagEigen};
