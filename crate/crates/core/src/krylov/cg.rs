use nalgebra::{DMatrix, DVector};

use super::tridiag::SymTridiagonal;
use crate::error::{invalid, GpError, Result};
use crate::linalg::{all_finite, dot, LinearOperator};
use crate::parallel::map_indexed;

/// Anything that can apply P̂⁻¹.
pub trait Preconditioner: Sync {
    fn size(&self) -> usize;
    fn solve(&self, r: &DVector<f64>) -> DVector<f64>;
}

impl<T: Preconditioner + ?Sized> Preconditioner for &T {
    fn size(&self) -> usize {
        (**self).size()
    }
    fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        (**self).solve(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityPreconditioner(pub usize);

impl Preconditioner for IdentityPreconditioner {
    fn size(&self) -> usize {
        self.0
    }
    fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        r.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgConfig {
    pub max_iters: usize,
    /// Stop once ‖b − A xₖ‖₂ ≤ rel_tol·‖b‖₂ (recursively updated residual).
    pub rel_tol: f64,
    pub collect_tridiag: bool,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig { max_iters: 1000, rel_tol: 1e-6, collect_tridiag: false }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return invalid("CG needs max_iters >= 1");
        }
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return invalid(format!("CG rel_tol must lie in (0, 1), got {}", self.rel_tol));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub solution: DVector<f64>,
    pub iterations_used: usize,
    /// ‖rₖ‖/‖b‖ after each iteration.
    pub residual_history: Vec<f64>,
    pub tridiag: Option<SymTridiagonal>,
    pub converged: bool,
    /// r₀ᵀP̂⁻¹r₀, the squared norm of the Lanczos start vector of the
    /// symmetrically preconditioned system.
    pub start_norm_sq: f64,
}

/// Preconditioned conjugate gradients on `a x = b`.
pub fn pcg_solve<A, P>(a: &A, b: &DVector<f64>, p: &P, cfg: &CgConfig, x0: Option<&DVector<f64>>) -> Result<CgResult>
where
    A: LinearOperator + ?Sized,
    P: Preconditioner + ?Sized,
{
    cfg.validate()?;
    let n = a.dim();
    if b.len() != n || p.size() != n {
        return invalid(format!("CG dimension mismatch: operator {n}, rhs {}, preconditioner {}", b.len(), p.size()));
    }
    if !all_finite(b) {
        return invalid("CG right-hand side has non-finite entries");
    }
    let mut x = match x0 {
        Some(x0) if x0.len() != n => return invalid("CG initial guess has the wrong length"),
        Some(x0) => x0.clone(),
        None => DVector::zeros(n),
    };
    let mut r = match x0 {
        Some(_) => b - a.apply(&x),
        None => b.clone(),
    };
    let bnorm = b.norm();
    let empty = |x: DVector<f64>, rz: f64| CgResult {
        solution: x,
        iterations_used: 0,
        residual_history: vec![],
        tridiag: cfg.collect_tridiag.then(|| SymTridiagonal { diag: vec![], off: vec![] }),
        converged: true,
        start_norm_sq: rz,
    };
    if bnorm == 0.0 {
        return Ok(empty(DVector::zeros(n), 0.0));
    }
    let tol = cfg.rel_tol * bnorm;

    let mut z = p.solve(&r);
    let mut rz = dot(r.as_slice(), z.as_slice());
    if r.norm() <= tol {
        return Ok(empty(x, rz));
    }
    if !(rz > 0.0 && rz.is_finite()) {
        return Err(GpError::Breakdown { iteration: 0, reason: format!("rᵀP̂⁻¹r = {rz}, preconditioner not positive definite") });
    }
    let start_norm_sq = rz;
    let mut dir = z.clone();
    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;

    for k in 1..=cfg.max_iters {
        let q = a.apply(&dir);
        let pq = dot(dir.as_slice(), q.as_slice());
        let alpha = rz / pq;
        if !(pq > 0.0 && alpha.is_finite()) {
            return Err(GpError::Breakdown { iteration: k, reason: format!("pᵀAp = {pq}, operator not positive definite") });
        }
        x.axpy(alpha, &dir, 1.0);
        r.axpy(-alpha, &q, 1.0);
        alphas.push(alpha);
        let rnorm = r.norm();
        if !rnorm.is_finite() {
            return Err(GpError::Breakdown { iteration: k, reason: "non-finite residual".into() });
        }
        history.push(rnorm / bnorm);
        if rnorm <= tol {
            converged = true;
            break;
        }
        if k == cfg.max_iters {
            break;
        }
        z = p.solve(&r);
        let rz_new = dot(r.as_slice(), z.as_slice());
        if !(rz_new > 0.0 && rz_new.is_finite()) {
            return Err(GpError::Breakdown { iteration: k, reason: format!("rᵀP̂⁻¹r = {rz_new}") });
        }
        let beta = rz_new / rz;
        betas.push(beta);
        dir.axpy(1.0, &z, beta);
        rz = rz_new;
    }

    let tridiag = cfg.collect_tridiag.then(|| lanczos_from_cg(&alphas, &betas));
    Ok(CgResult { solution: x, iterations_used: alphas.len(), residual_history: history, tridiag, converged, start_norm_sq })
}

fn lanczos_from_cg(alphas: &[f64], betas: &[f64]) -> SymTridiagonal {
    let k = alphas.len();
    let mut diag = Vec::with_capacity(k);
    let mut off = Vec::with_capacity(k.saturating_sub(1));
    for i in 0..k {
        let mut d = 1.0 / alphas[i];
        if i > 0 {
            d += betas[i - 1] / alphas[i - 1];
        }
        diag.push(d);
        if i + 1 < k {
            off.push(betas[i].sqrt() / alphas[i]);
        }
    }
    SymTridiagonal { diag, off }
}

/// Independent PCG solves for every column of `b`; columns run concurrently.
pub fn batched_pcg<A, P>(a: &A, b: &DMatrix<f64>, p: &P, cfg: &CgConfig) -> Result<Vec<CgResult>>
where
    A: LinearOperator + ?Sized,
    P: Preconditioner + ?Sized,
{
    if b.nrows() != a.dim() {
        return invalid(format!("batched CG: rhs has {} rows, operator dimension {}", b.nrows(), a.dim()));
    }
    map_indexed(b.ncols(), |j| {
        let col = b.column(j).into_owned();
        pcg_solve(a, &col, p, cfg, None).map_err(|e| GpError::Column { column: j, source: Box::new(e) })
    })
    .into_iter()
    .collect()
}
