use nalgebra::{DMatrix, DVector};

use super::Objective;
use crate::error::{invalid, Result};
use crate::kernels::{kernel_value, Hyperparameters, KernelOperator, KernelSpec, OperatorMode};
use crate::likelihood::{mll_estimate, mll_evaluate, mll_exact, MllConfig, DENSE_LIMIT};
use crate::parallel::map_indexed;
use crate::preconditioners::{build_preconditioner, DiagPlusLowRank, PrecondSpec};
use crate::trace::make_probes;

/// Inputs (`n × d`) and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GpData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl GpData {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() || x.nrows() == 0 {
            return invalid(format!("{} inputs but {} targets", x.nrows(), y.len()));
        }
        Ok(GpData { x, y })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// Negative log-marginal likelihood per point on a held-out block, exact up to
/// the dense limit and estimated with a fixed probe seed above it.
pub fn held_out_nll(data: &GpData, spec: &KernelSpec, params: &Hyperparameters, precond: &PrecondSpec, rank: usize, mll: &MllConfig) -> Result<f64> {
    let n = data.n();
    if n <= DENSE_LIMIT {
        return Ok(-mll_exact(&data.y, &data.x, spec, params)?.0 / n as f64);
    }
    let op = KernelOperator::new(*spec, data.x.clone(), params.clone(), OperatorMode::matrix_free())?;
    let p = build_preconditioner(&op, precond, rank.min(n), 0)?;
    let batch = make_probes(n, mll.num_probes, 0)?;
    Ok(-mll_estimate(&data.y, &op, &p, &batch, &mll.cg)?.value / n as f64)
}

/// `−L(θ)/n` estimated with preconditioned CG and stochastic trace estimators.
/// The preconditioner is rebuilt at the start of every step. Line-search
/// trials of that step re-evaluate it with the builder's choices kept.
#[derive(Debug, Clone)]
pub struct GpObjective {
    pub train: GpData,
    pub validation: Option<GpData>,
    pub spec: KernelSpec,
    pub precond: PrecondSpec,
    pub rank: usize,
    pub mll: MllConfig,
    pub mode: OperatorMode,
    /// Seed for randomized preconditioner builders.
    pub precond_seed: u64,
    /// Preconditioner and the point it was built at.
    current: Option<(Vec<f64>, DiagPlusLowRank)>,
}

impl GpObjective {
    pub fn new(train: GpData, validation: Option<GpData>, spec: KernelSpec, precond: PrecondSpec, rank: usize, mll: MllConfig) -> Self {
        let mode = OperatorMode::auto(train.n(), DENSE_LIMIT);
        GpObjective { train, validation, spec, precond, rank, mll, mode, precond_seed: 0, current: None }
    }

    fn operator(&self, theta: &[f64]) -> Result<KernelOperator> {
        let params = Hyperparameters::from_log_vector(theta)?;
        KernelOperator::new(self.spec, self.train.x.clone(), params, self.mode)
    }
}

impl Objective for GpObjective {
    fn begin_step(&mut self, theta: &[f64]) -> Result<()> {
        let op = self.operator(theta)?;
        let p = build_preconditioner(&op, &self.precond, self.rank.min(op.n()), self.precond_seed)?;
        self.current = Some((theta.to_vec(), p));
        Ok(())
    }

    fn evaluate(&mut self, theta: &[f64], seed: u64) -> Result<(f64, Vec<f64>)> {
        if self.current.is_none() {
            self.begin_step(theta)?;
        }
        let op = self.operator(theta)?;
        let (at, built) = self.current.as_ref().expect("built above");
        let refreshed;
        let p = if at.as_slice() == theta {
            built
        } else {
            refreshed = built.refresh(&op)?;
            &refreshed
        };
        let e = mll_evaluate(&self.train.y, &op, p, &self.mll, seed)?;
        let n = self.train.n() as f64;
        Ok((-e.value / n, e.gradient.iter().map(|g| -g / n).collect()))
    }

    fn validation(&mut self, theta: &[f64]) -> Result<Option<f64>> {
        let Some(v) = &self.validation else { return Ok(None) };
        let params = Hyperparameters::from_log_vector(theta)?;
        held_out_nll(v, &self.spec, &params, &self.precond, self.rank, &self.mll).map(Some)
    }
}

/// `−L(θ)/n` by dense Cholesky; the reference for [`GpObjective`].
#[derive(Debug, Clone)]
pub struct ExactGpObjective {
    pub train: GpData,
    pub validation: Option<GpData>,
    pub spec: KernelSpec,
}

impl Objective for ExactGpObjective {
    fn evaluate(&mut self, theta: &[f64], _seed: u64) -> Result<(f64, Vec<f64>)> {
        let params = Hyperparameters::from_log_vector(theta)?;
        let (v, g) = mll_exact(&self.train.y, &self.train.x, &self.spec, &params)?;
        let n = self.train.n() as f64;
        Ok((-v / n, g.iter().map(|g| -g / n).collect()))
    }

    fn validation(&mut self, theta: &[f64]) -> Result<Option<f64>> {
        let Some(v) = &self.validation else { return Ok(None) };
        let params = Hyperparameters::from_log_vector(theta)?;
        Ok(Some(-mll_exact(&v.y, &v.x, &self.spec, &params)?.0 / v.n() as f64))
    }
}

/// Posterior mean `K(X*, X) u` with `u = K̂⁻¹y`.
pub fn predictive_mean(spec: &KernelSpec, params: &Hyperparameters, x_train: &DMatrix<f64>, u: &DVector<f64>, x_test: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x_train.nrows() != u.len() || x_train.ncols() != x_test.ncols() {
        return invalid("predictive mean: shape mismatch");
    }
    let rows: Vec<Vec<f64>> = (0..x_train.nrows()).map(|j| x_train.row(j).iter().copied().collect()).collect();
    let vals = map_indexed(x_test.nrows(), |i| -> Result<f64> {
        let xi: Vec<f64> = x_test.row(i).iter().copied().collect();
        let mut s = 0.0;
        for (j, xj) in rows.iter().enumerate() {
            s += kernel_value(spec, params, &xi, xj)? * u[j];
        }
        Ok(s)
    });
    Ok(DVector::from_vec(vals.into_iter().collect::<Result<Vec<_>>>()?))
}
