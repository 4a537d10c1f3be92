//! Log-marginal likelihood
//!
//! ```text
//! L(θ) = −½ (yᵀK̂⁻¹y + log det K̂ + n log 2π)
//! ∂L/∂θ = ½ (uᵀ ∂K̂ u − tr(K̂⁻¹ ∂K̂)),   u = K̂⁻¹y
//! ```
//!
//! estimated with preconditioned CG and the variance-reduced trace
//! estimators, plus a dense reference. Gradients are returned with respect to
//! the log-hyperparameters.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, GpError, Result};
use crate::kernels::{Hyperparameters, KernelOperator, KernelSpec, OperatorMode};
use crate::krylov::{pcg_solve, CgConfig, CgResult};
use crate::linalg::{dot, DerivOperator, LinearOperator};
use crate::preconditioners::{DiagPlusLowRank, SpdPreconditioner};
use crate::trace::{make_probes, vr_logdet, vr_trace_inv_deriv, ProbeBatch, VrDiagnostics};

pub const DENSE_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MllConfig {
    pub cg: CgConfig,
    pub num_probes: usize,
    /// Reuse the forward probe batch for the gradient.
    pub share_probes: bool,
}

impl Default for MllConfig {
    fn default() -> Self {
        MllConfig { cg: CgConfig::default(), num_probes: 16, share_probes: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MllEvaluation {
    pub value: f64,
    /// `∂L/∂ log θ` in [`Hyperparameters::to_log_vector`] order.
    pub gradient: Vec<f64>,
    /// Total CG iterations over all solves.
    pub solve_iterations: usize,
    pub forward_gammas: Vec<f64>,
    pub backward_gammas: Vec<Vec<f64>>,
    pub probe_seed: u64,
}

/// Forward pass: value plus the shared solve `u = K̂⁻¹y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub value: f64,
    pub solve: CgResult,
    pub logdet: f64,
    pub diagnostics: VrDiagnostics,
}

fn check_y(y: &DVector<f64>, n: usize) -> Result<()> {
    if y.len() != n {
        return invalid(format!("y has length {}, operator dimension {n}", y.len()));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return invalid("y contains non-finite values");
    }
    Ok(())
}

pub fn mll_estimate<K, P>(y: &DVector<f64>, k: &K, p: &P, batch: &ProbeBatch, cfg: &CgConfig) -> Result<ForwardPass>
where
    K: LinearOperator + ?Sized,
    P: SpdPreconditioner + ?Sized,
{
    let n = k.dim();
    check_y(y, n)?;
    let solve = pcg_solve(k, y, p, &CgConfig { collect_tridiag: false, ..*cfg }, None)?;
    let (logdet, diagnostics) = vr_logdet(k, p, batch, cfg)?;
    let fit = dot(y.as_slice(), solve.solution.as_slice());
    let value = -0.5 * (fit + logdet + n as f64 * (2.0 * PI).ln());
    if !value.is_finite() {
        return Err(GpError::Numerical("non-finite likelihood estimate".into()));
    }
    Ok(ForwardPass { value, solve, logdet, diagnostics })
}

/// Gradient in log-space from per-hyperparameter derivative operators.
/// `raw[i]` is the raw value of hyperparameter `i`, used for the chain rule.
#[allow(clippy::too_many_arguments)]
pub fn mll_gradient<K, P>(
    u: &DVector<f64>,
    k: &K,
    dk: &[&dyn LinearOperator],
    p: &P,
    dp: &[&dyn DerivOperator],
    raw: &[f64],
    batch: &ProbeBatch,
    cfg: &CgConfig,
) -> Result<(Vec<f64>, Vec<VrDiagnostics>)>
where
    K: LinearOperator + ?Sized,
    P: SpdPreconditioner + ?Sized,
{
    if dk.len() != dp.len() || dk.len() != raw.len() {
        return invalid("need one kernel derivative, one preconditioner derivative and one value per hyperparameter");
    }
    if u.len() != k.dim() {
        return invalid("u has the wrong length");
    }
    let cfg = CgConfig { collect_tridiag: false, ..*cfg };
    let mut grad = Vec::with_capacity(raw.len());
    let mut diags = Vec::with_capacity(raw.len());
    for i in 0..raw.len() {
        let (tau, d) = vr_trace_inv_deriv(k, dk[i], p, dp[i], batch, &cfg)?;
        let quad = dot(u.as_slice(), dk[i].apply(u).as_slice());
        let g = 0.5 * (quad - tau) * raw[i];
        if !g.is_finite() {
            return Err(GpError::Numerical(format!("non-finite gradient component {i}")));
        }
        grad.push(g);
        diags.push(d);
    }
    Ok((grad, diags))
}

/// Value and gradient at the operator's hyperparameters with probes drawn
/// from `seed` (the gradient uses `seed + 1` unless probes are shared).
pub fn mll_evaluate(
    y: &DVector<f64>,
    op: &KernelOperator,
    p: &DiagPlusLowRank,
    cfg: &MllConfig,
    seed: u64,
) -> Result<MllEvaluation> {
    let n = op.n();
    let batch = make_probes(n, cfg.num_probes, seed)?;
    let fwd = mll_estimate(y, op, p, &batch, &cfg.cg)?;
    let back_batch = if cfg.share_probes { batch } else { make_probes(n, cfg.num_probes, seed.wrapping_add(1))? };

    let params = op.params();
    let which = params.indices();
    let dk_ops = which.iter().map(|&w| op.deriv_operator(w)).collect::<Result<Vec<_>>>()?;
    let dp_ops = which.iter().map(|&w| p.derivative(op, w)).collect::<Result<Vec<_>>>()?;
    let raw = which.iter().map(|&w| params.raw_value(w)).collect::<Result<Vec<_>>>()?;
    let dk: Vec<&dyn LinearOperator> = dk_ops.iter().map(|d| d as &dyn LinearOperator).collect();
    let dp: Vec<&dyn DerivOperator> = dp_ops.iter().map(|d| d as &dyn DerivOperator).collect();
    let (gradient, diags) = mll_gradient(&fwd.solve.solution, op, &dk, p, &dp, &raw, &back_batch, &cfg.cg)?;

    let solve_iterations = fwd.solve.iterations_used
        + fwd.diagnostics.cg_iterations.iter().sum::<usize>()
        + diags.iter().flat_map(|d| d.cg_iterations.iter()).sum::<usize>();
    Ok(MllEvaluation {
        value: fwd.value,
        gradient,
        solve_iterations,
        forward_gammas: fwd.diagnostics.residual.per_probe,
        backward_gammas: diags.into_iter().map(|d| d.residual.per_probe).collect(),
        probe_seed: seed,
    })
}

/// Exact `L` and `∂L/∂ log θ` by dense Cholesky.
pub fn mll_exact(y: &DVector<f64>, x: &DMatrix<f64>, spec: &KernelSpec, params: &Hyperparameters) -> Result<(f64, Vec<f64>)> {
    let n = x.nrows();
    if n > DENSE_LIMIT {
        return invalid(format!("dense likelihood limited to n <= {DENSE_LIMIT}, got {n}"));
    }
    check_y(y, n)?;
    let op = KernelOperator::new(*spec, x.clone(), params.clone(), OperatorMode::Dense)?;
    let chol = op.dense_k_hat().cholesky().ok_or_else(|| {
        GpError::Numerical(format!("K̂ is not positive definite at σ² = {:.3e}; try a larger noise", params.noise()))
    })?;
    let alpha = chol.solve(y);
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let value = -0.5 * (y.dot(&alpha) + logdet + n as f64 * (2.0 * PI).ln());
    let k_inv = chol.inverse();
    let mut grad = Vec::with_capacity(params.len());
    for which in params.indices() {
        let d = op.dense_deriv(which)?;
        let quad = alpha.dot(&(&d * &alpha));
        let tr = k_inv.component_mul(&d).sum();
        grad.push(0.5 * (quad - tr) * params.raw_value(which)?);
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests;
