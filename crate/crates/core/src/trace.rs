//! Hutchinson probes, stochastic Lanczos quadrature and the preconditioner
//! deflated trace estimators
//!
//! ```text
//! log det K̂        ≈ log det P̂ + (n/ℓ) Σ zᵢᵀ log(P̂^{-1/2} K̂ P̂^{-1/2}) zᵢ
//! tr(K̂⁻¹ ∂K̂)      ≈ tr(P̂⁻¹ ∂P̂) + (n/ℓ) Σ zᵢᵀ (K̂⁻¹ ∂K̂ − P̂⁻¹ ∂P̂) zᵢ
//! ```

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, GpError, Result};
use crate::krylov::{pcg_solve, CgConfig, SymTridiagonal};
use crate::linalg::{dot, DerivOperator, LinearOperator};
use crate::parallel::map_indexed;
use crate::preconditioners::SpdPreconditioner;

/// Normalized Rademacher probes, one per column, entries `±1/√n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeBatch {
    pub probes: DMatrix<f64>,
    pub seed: u64,
}

impl ProbeBatch {
    pub fn n(&self) -> usize {
        self.probes.nrows()
    }

    pub fn count(&self) -> usize {
        self.probes.ncols()
    }

    pub fn probe(&self, i: usize) -> DVector<f64> {
        self.probes.column(i).into_owned()
    }
}

pub fn make_probes(n: usize, count: usize, seed: u64) -> Result<ProbeBatch> {
    if n == 0 || count == 0 {
        return invalid(format!("probe batch needs n >= 1 and count >= 1, got n {n}, count {count}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1.0 / (n as f64).sqrt();
    let probes = DMatrix::from_fn(n, count, |_, _| if rng.random::<bool>() { h } else { -h });
    Ok(ProbeBatch { probes, seed })
}

/// `(n/ℓ) Σ qᵢ` together with the per-probe values `n·qᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEstimate {
    pub estimate: f64,
    pub per_probe: Vec<f64>,
    /// Unbiased sample variance of `per_probe`; zero for a single probe.
    pub sample_variance: f64,
}

impl TraceEstimate {
    fn from_per_probe(per_probe: Vec<f64>) -> Result<Self> {
        if let Some(probe) = per_probe.iter().position(|q| !q.is_finite()) {
            return Err(GpError::NonFiniteProbe { probe });
        }
        let l = per_probe.len() as f64;
        let estimate = per_probe.iter().sum::<f64>() / l;
        let sample_variance = if per_probe.len() > 1 {
            per_probe.iter().map(|q| (q - estimate).powi(2)).sum::<f64>() / (l - 1.0)
        } else {
            0.0
        };
        Ok(TraceEstimate { estimate, per_probe, sample_variance })
    }

    /// Standard error of `estimate`.
    pub fn standard_error(&self) -> f64 {
        (self.sample_variance / self.per_probe.len() as f64).sqrt()
    }
}

pub fn hutchinson<F>(quadratic_form: F, batch: &ProbeBatch) -> Result<TraceEstimate>
where
    F: Fn(&DVector<f64>) -> f64 + Sync + Send,
{
    let n = batch.n() as f64;
    let q = map_indexed(batch.count(), |i| n * quadratic_form(&batch.probe(i)));
    TraceEstimate::from_per_probe(q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlqTerm {
    pub probe_index: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// `Σⱼ ωⱼ f(λⱼ)`.
    pub value: f64,
    pub clamped: usize,
}

/// Gauss quadrature `e₁ᵀ f(T) e₁` from the Lanczos tridiagonal. Nodes below
/// `clamp_floor` (default `1e-12` times the largest node) are raised to it.
pub fn slq_quadrature(t: &SymTridiagonal, f: impl Fn(f64) -> f64, clamp_floor: Option<f64>) -> Result<SlqTerm> {
    if t.len() == 0 {
        return Ok(SlqTerm { probe_index: 0, nodes: vec![], weights: vec![], value: 0.0, clamped: 0 });
    }
    let e = t.eigen()?;
    let top = e.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(top > 0.0) {
        return Err(GpError::Numerical(format!("largest Ritz value {top} is not positive")));
    }
    let floor = clamp_floor.unwrap_or(1e-12 * top);
    let mut clamped = 0;
    let nodes: Vec<f64> = e
        .values
        .iter()
        .map(|&v| {
            if v < floor {
                clamped += 1;
                floor
            } else {
                v
            }
        })
        .collect();
    let value = nodes.iter().zip(&e.first_components_sq).map(|(&x, &w)| w * f(x)).sum::<f64>();
    if !value.is_finite() {
        return Err(GpError::Numerical("non-finite quadrature value".into()));
    }
    Ok(SlqTerm { probe_index: 0, nodes, weights: e.first_components_sq, value, clamped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VrDiagnostics {
    /// `log det P̂` or `tr(P̂⁻¹ ∂P̂)`.
    pub deterministic: f64,
    /// The stochastic residual term.
    pub residual: TraceEstimate,
    pub cg_iterations: Vec<usize>,
    pub all_converged: bool,
    pub clamped_nodes: usize,
}

/// `log det P̂ + (n/ℓ) Σ γᵢ` with `γᵢ` the Lanczos quadrature of
/// `zᵢᵀ log(P̂^{-1/2} K̂ P̂^{-1/2}) zᵢ`, read off preconditioned CG on
/// `K̂ x = P̂^{1/2} zᵢ`.
pub fn vr_logdet<K, P>(k: &K, p: &P, batch: &ProbeBatch, cfg: &CgConfig) -> Result<(f64, VrDiagnostics)>
where
    K: LinearOperator + ?Sized,
    P: SpdPreconditioner + ?Sized,
{
    let n = check_dims(k.dim(), p.dim(), batch)?;
    let cfg = CgConfig { collect_tridiag: true, ..*cfg };
    let runs = map_indexed(batch.count(), |i| -> Result<(f64, usize, bool, usize)> {
        let b = p.sqrt_apply(&batch.probe(i));
        let res = pcg_solve(k, &b, p, &cfg, None).map_err(|e| GpError::Column { column: i, source: Box::new(e) })?;
        let t = res.tridiag.as_ref().expect("tridiagonal requested");
        let term = slq_quadrature(t, f64::ln, None)?;
        Ok((n as f64 * res.start_norm_sq * term.value, res.iterations_used, res.converged, term.clamped))
    });
    let deterministic = p.logdet()?;
    finish(deterministic, runs)
}

/// `tr(P̂⁻¹ ∂P̂) + (n/ℓ) Σ zᵢᵀ(wᵢ − w̃ᵢ)` with `wᵢ` the CG solve of
/// `K̂ w = ∂K̂ zᵢ` (started at zero) and `w̃ᵢ = P̂⁻¹ ∂P̂ zᵢ`.
pub fn vr_trace_inv_deriv<K, DK, P>(
    k: &K,
    dk: &DK,
    p: &P,
    dp: &dyn DerivOperator,
    batch: &ProbeBatch,
    cfg: &CgConfig,
) -> Result<(f64, VrDiagnostics)>
where
    K: LinearOperator + ?Sized,
    DK: LinearOperator + ?Sized,
    P: SpdPreconditioner + ?Sized,
{
    let n = check_dims(k.dim(), p.dim(), batch)?;
    if dk.dim() != n || dp.dim() != n {
        return invalid("derivative operator dimension mismatch");
    }
    let runs = map_indexed(batch.count(), |i| -> Result<(f64, usize, bool, usize)> {
        let z = batch.probe(i);
        let res = pcg_solve(k, &dk.apply(&z), p, cfg, None).map_err(|e| GpError::Column { column: i, source: Box::new(e) })?;
        let w_tilde = p.solve(&dp.apply(&z));
        let gamma = dot(z.as_slice(), res.solution.as_slice()) - dot(z.as_slice(), w_tilde.as_slice());
        Ok((n as f64 * gamma, res.iterations_used, res.converged, 0))
    });
    let deterministic = p.trace_inv_deriv(dp)?;
    finish(deterministic, runs)
}

fn check_dims(k: usize, p: usize, batch: &ProbeBatch) -> Result<usize> {
    if k != p || batch.n() != k {
        return invalid(format!("dimension mismatch: operator {k}, preconditioner {p}, probes {}", batch.n()));
    }
    Ok(k)
}

fn finish(deterministic: f64, runs: Vec<Result<(f64, usize, bool, usize)>>) -> Result<(f64, VrDiagnostics)> {
    let mut per_probe = Vec::with_capacity(runs.len());
    let mut cg_iterations = Vec::with_capacity(runs.len());
    let mut all_converged = true;
    let mut clamped_nodes = 0;
    for run in runs {
        let (v, it, conv, cl) = run?;
        per_probe.push(v);
        cg_iterations.push(it);
        all_converged &= conv;
        clamped_nodes += cl;
    }
    let residual = TraceEstimate::from_per_probe(per_probe)?;
    if !deterministic.is_finite() {
        return Err(GpError::Numerical("non-finite preconditioner term".into()));
    }
    let diag = VrDiagnostics { deterministic, residual, cg_iterations, all_converged, clamped_nodes };
    Ok((deterministic + diag.residual.estimate, diag))
}

#[cfg(test)]
mod tests;
