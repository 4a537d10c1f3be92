//! Diagonal-plus-low-rank preconditioners `P̂ = σ² I + L Lᵀ`.
//!
//! Besides solves, a preconditioner must provide its log-determinant, its
//! square root (to map probes into the preconditioned system) and
//! `tr(P̂⁻¹ ∂P̂/∂θ)`. Derivatives of `P̂` are taken with the random or greedy
//! choices of the builder frozen: pivots, sampled columns, eigenvector bases
//! and Fourier frequencies stay fixed while the kernel entries move.

mod cholesky;
mod features;
mod nystrom;
mod quality;
mod svd;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, GpError, Result};
use crate::kernels::{HyperIndex, KernelOperator};
use crate::krylov::Preconditioner;
use crate::linalg::{dot, DerivOperator, LinearOperator};
use crate::parallel::map_indexed;

pub use cholesky::{cholesky_in_order, pivoted_cholesky, PartialCholesky};
pub use features::{gauss_hermite, qff_map, rff_map, FeatureMap};
pub use nystrom::{nystroem, NystroemFactor, SamplingProbabilities};
use nystrom::nystroem_from_columns;
pub use quality::{function_error, quality_curve, QualityCurve};
pub use svd::{randomized_svd, truncated_svd, LowRankEigen};

/// A preconditioner usable by the variance-reduced estimators.
pub trait SpdPreconditioner: LinearOperator + Preconditioner {
    /// `P̂^{1/2} v` for the symmetric square root.
    fn sqrt_apply(&self, v: &DVector<f64>) -> DVector<f64>;
    fn logdet(&self) -> Result<f64>;
    /// `tr(P̂⁻¹ D)` for `D = ∂P̂/∂θ`.
    fn trace_inv_deriv(&self, dp: &dyn DerivOperator) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrecondKind {
    /// `P̂ = σ² I`.
    Identity,
    PivotedCholesky,
    TruncatedSvd,
    RandomizedSvd,
    Nystroem,
    Rff,
    Qff,
    /// A caller-supplied factor.
    Custom,
}

impl PrecondKind {
    pub fn name(self) -> &'static str {
        match self {
            PrecondKind::Identity => "none",
            PrecondKind::PivotedCholesky => "pivchol",
            PrecondKind::TruncatedSvd => "svd",
            PrecondKind::RandomizedSvd => "rsvd",
            PrecondKind::Nystroem => "nystroem",
            PrecondKind::Rff => "rff",
            PrecondKind::Qff => "qff",
            PrecondKind::Custom => "custom",
        }
    }
}

/// Scalar functions applied spectrally to `P̂` or `K̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFunction {
    Identity,
    Log,
    Inverse,
    Sqrt,
}

impl MatrixFunction {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            MatrixFunction::Identity => x,
            MatrixFunction::Log => x.ln(),
            MatrixFunction::Inverse => 1.0 / x,
            MatrixFunction::Sqrt => x.sqrt(),
        }
    }

    /// `(f(b + s) − f(b)) / s` without cancellation, `s ≥ 0`.
    fn divided_difference(self, b: f64, s: f64) -> f64 {
        match self {
            MatrixFunction::Identity => 1.0,
            MatrixFunction::Log => {
                let r = s / b;
                if r < 1e-8 {
                    (1.0 - 0.5 * r) / b
                } else {
                    r.ln_1p() / s
                }
            }
            MatrixFunction::Inverse => -1.0 / (b * (b + s)),
            MatrixFunction::Sqrt => 1.0 / ((b + s).sqrt() + b.sqrt()),
        }
    }
}

/// How `∂(L Lᵀ)/∂θ` is formed.
#[derive(Debug, Clone)]
enum DerivRecipe {
    /// The low-rank part does not depend on the hyperparameters.
    Fixed,
    /// `L = K[:, indices] G` (pivoted Cholesky). `diag_tol` is relative to
    /// the largest diagonal entry.
    Columns { indices: Vec<usize>, g: DMatrix<f64>, diag_tol: f64 },
    /// `L Lᵀ = C U diag(g) Uᵀ Cᵀ` with `C = K[:, indices]`, `W = C[indices, :] = U Λ Uᵀ`,
    /// `gᵢ = 1/λᵢ` on the retained eigenpairs and zero elsewhere (Nyström).
    TruncatedCore { indices: Vec<usize>, basis: DMatrix<f64>, vectors: DMatrix<f64>, values: DVector<f64>, g: Vec<f64> },
    /// `L Lᵀ = V (Vᵀ K V) Vᵀ` with `V` frozen (SVD variants).
    FrozenBasis { basis: DMatrix<f64> },
    /// Feature map at frozen frequencies.
    Features(FeatureMap),
}

/// `P̂ = σ² I + L Lᵀ` with its Woodbury and spectral factorizations cached.
#[derive(Debug, Clone)]
pub struct DiagPlusLowRank {
    noise: f64,
    factor: DMatrix<f64>,
    kind: PrecondKind,
    pivots: Option<Vec<usize>>,
    recipe: DerivRecipe,
    /// `factor`, or an `n × n` matrix with the same `L Lᵀ` when `ℓ > n`.
    work: DMatrix<f64>,
    /// Cholesky of `σ² I + LᵀL` (of `work`).
    inner: Cholesky<f64, Dyn>,
    logdet: f64,
    /// `W = L V` where `LᵀL = V S Vᵀ`; then `f(P̂) = f(σ²) I + W D_f Wᵀ`.
    spec_w: DMatrix<f64>,
    spec_s: DVector<f64>,
}

impl DiagPlusLowRank {
    /// `σ² I + L Lᵀ` for a user-supplied factor that does not depend on the
    /// hyperparameters.
    pub fn new(noise: f64, factor: DMatrix<f64>, kind: PrecondKind) -> Result<Self> {
        Self::with_recipe(noise, factor, kind, None, DerivRecipe::Fixed)
    }

    /// `σ² I` on `n` points.
    pub fn identity(n: usize, noise: f64) -> Result<Self> {
        Self::new(noise, DMatrix::zeros(n, 0), PrecondKind::Identity)
    }

    fn with_recipe(
        noise: f64,
        factor: DMatrix<f64>,
        kind: PrecondKind,
        pivots: Option<Vec<usize>>,
        recipe: DerivRecipe,
    ) -> Result<Self> {
        if !(noise.is_finite() && noise > 0.0) {
            return invalid(format!("preconditioner needs a positive noise variance, got {noise}"));
        }
        if factor.nrows() == 0 {
            return invalid("preconditioner factor has no rows");
        }
        if !factor.iter().all(|x| x.is_finite()) {
            return Err(GpError::Numerical("preconditioner factor has non-finite entries".into()));
        }
        let (n, r) = factor.shape();
        let work = if r > n {
            let e = SymmetricEigen::new(&factor * factor.transpose());
            let mut w = e.eigenvectors;
            for (j, mut col) in w.column_iter_mut().enumerate() {
                col *= e.eigenvalues[j].max(0.0).sqrt();
            }
            w
        } else {
            factor.clone()
        };
        let r = work.ncols();
        let gram = work.tr_mul(&work);
        let mut inner_m = gram.clone();
        for i in 0..r {
            inner_m[(i, i)] += noise;
        }
        let inner = Cholesky::new(inner_m)
            .ok_or_else(|| GpError::Numerical("Woodbury inner matrix is not positive definite".into()))?;
        let inner_logdet: f64 = 2.0 * inner.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let logdet = (n as f64 - r as f64) * noise.ln() + inner_logdet;
        if !logdet.is_finite() {
            return Err(GpError::Numerical("preconditioner log-determinant is not finite".into()));
        }
        let (spec_w, spec_s) = if r == 0 {
            (DMatrix::zeros(n, 0), DVector::zeros(0))
        } else {
            let eig = SymmetricEigen::new(gram);
            (&work * &eig.eigenvectors, eig.eigenvalues.map(|s| s.max(0.0)))
        };
        Ok(DiagPlusLowRank { noise, factor, kind, pivots, recipe, work, inner, logdet, spec_w, spec_s })
    }

    pub fn n(&self) -> usize {
        self.factor.nrows()
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn kind(&self) -> PrecondKind {
        self.kind
    }

    /// Pivot order (pivoted Cholesky only).
    pub fn pivots(&self) -> Option<&[usize]> {
        self.pivots.as_deref()
    }

    pub fn log_determinant(&self) -> f64 {
        self.logdet
    }

    /// Woodbury: `σ⁻²(v − L (σ² I + LᵀL)⁻¹ Lᵀ v)`.
    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        if self.rank() > 0 {
            let t = self.inner.solve(&self.work.tr_mul(v));
            out.gemv(-1.0, &self.work, &t, 1.0);
        }
        out / self.noise
    }

    pub fn apply_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v * self.noise;
        if self.rank() > 0 {
            out.gemv(1.0, &self.work, &self.work.tr_mul(v), 1.0);
        }
        out
    }

    /// `f(P̂) v`.
    pub fn function_apply(&self, f: MatrixFunction, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v * f.eval(self.noise);
        if self.rank() > 0 {
            let mut c = self.spec_w.tr_mul(v);
            for (ci, &s) in c.iter_mut().zip(self.spec_s.iter()) {
                *ci *= f.divided_difference(self.noise, s);
            }
            out.gemv(1.0, &self.spec_w, &c, 1.0);
        }
        out
    }

    /// Dense `f(P̂)`.
    pub fn dense_function(&self, f: MatrixFunction) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::identity(n, n) * f.eval(self.noise);
        if self.rank() > 0 {
            let mut scaled = self.spec_w.clone();
            for (j, mut col) in scaled.column_iter_mut().enumerate() {
                col *= f.divided_difference(self.noise, self.spec_s[j]);
            }
            out.gemm(1.0, &scaled, &self.spec_w.transpose(), 1.0);
        }
        crate::linalg::symmetrize_upper(&mut out);
        out
    }

    pub fn dense(&self) -> DMatrix<f64> {
        self.dense_function(MatrixFunction::Identity)
    }

    /// `P̂` at the hyperparameters of `op` with the builder's choices kept
    /// (the surrogate whose derivative [`Self::derivative`] returns).
    pub fn refresh(&self, op: &KernelOperator) -> Result<Self> {
        let n = self.n();
        if op.n() != n {
            return invalid(format!("operator has n = {}, preconditioner n = {n}", op.n()));
        }
        let noise = op.noise();
        let columns = |indices: &[usize]| DMatrix::from_columns(&map_indexed(indices.len(), |k| op.column(indices[k])));
        match &self.recipe {
            DerivRecipe::Fixed => Self::with_recipe(noise, self.factor.clone(), self.kind, self.pivots.clone(), DerivRecipe::Fixed),
            DerivRecipe::Columns { indices, diag_tol, .. } => {
                let pc = cholesky_in_order(op, indices, diag_tol * op.diagonal().max())?;
                let g = pc.pivot_block_inverse_t()?;
                let recipe = DerivRecipe::Columns { indices: pc.pivots.clone(), g, diag_tol: *diag_tol };
                Self::with_recipe(noise, pc.factor, self.kind, Some(pc.pivots), recipe)
            }
            DerivRecipe::TruncatedCore { indices, g, .. } => {
                let c = columns(indices);
                let rank = g.iter().filter(|v| **v != 0.0).count();
                let f = nystroem_from_columns(c.clone(), indices.clone(), rank)?;
                let mut g = vec![0.0; indices.len()];
                for &i in &f.kept {
                    g[i] = 1.0 / f.core_values[i];
                }
                let basis = c * &f.core_vectors;
                let recipe = DerivRecipe::TruncatedCore {
                    indices: f.indices,
                    basis,
                    vectors: f.core_vectors,
                    values: f.core_values,
                    g,
                };
                Self::with_recipe(noise, f.factor, self.kind, None, recipe)
            }
            DerivRecipe::FrozenBasis { basis } => {
                let kv = map_indexed(basis.ncols(), |k| op.kernel_only_matvec(&basis.column(k).into_owned()));
                let mut core = basis.tr_mul(&DMatrix::from_columns(&kv));
                symmetrize(&mut core);
                let eig = SymmetricEigen::new(core);
                let mut factor = basis * &eig.eigenvectors;
                for (j, mut col) in factor.column_iter_mut().enumerate() {
                    col *= eig.eigenvalues[j].max(0.0).sqrt();
                }
                Self::with_recipe(noise, factor, self.kind, None, DerivRecipe::FrozenBasis { basis: basis.clone() })
            }
            DerivRecipe::Features(map) => {
                let factor = map.features(op.data(), op.spec(), op.params())?;
                Self::with_recipe(noise, factor, self.kind, None, DerivRecipe::Features(map.clone()))
            }
        }
    }

    /// `∂P̂/∂θ` for the raw hyperparameter `which`, with the builder's
    /// choices frozen. `op` must hold the hyperparameters `P̂` was built at.
    pub fn derivative(&self, op: &KernelOperator, which: HyperIndex) -> Result<LowRankDerivative> {
        let n = self.n();
        if op.n() != n {
            return invalid(format!("operator has n = {}, preconditioner n = {n}", op.n()));
        }
        op.params().flat_index(which)?;
        if which == HyperIndex::Noise {
            return Ok(LowRankDerivative::scaled_identity(n, 1.0));
        }
        match &self.recipe {
            DerivRecipe::Fixed => Ok(LowRankDerivative::scaled_identity(n, 0.0)),
            DerivRecipe::Columns { indices, g, .. } => {
                let cols = map_indexed(indices.len(), |k| op.deriv_column(which, indices[k]));
                let dc = DMatrix::from_columns(&cols.into_iter().collect::<Result<Vec<_>>>()?);
                let m = &dc * g;
                let dw = dc.select_rows(indices.iter());
                let mut h = -(g.transpose() * dw * g);
                symmetrize(&mut h);
                LowRankDerivative::new(0.0, self.factor.clone(), m, h)
            }
            DerivRecipe::TruncatedCore { indices, basis, vectors, values, g } => {
                let cols = map_indexed(indices.len(), |k| op.deriv_column(which, indices[k]));
                let dc = DMatrix::from_columns(&cols.into_iter().collect::<Result<Vec<_>>>()?);
                let s = g.len();
                let mut m = &dc * vectors;
                for (j, mut col) in m.column_iter_mut().enumerate() {
                    col *= g[j];
                }
                let dw = dc.select_rows(indices.iter());
                let mut h = vectors.tr_mul(&(dw * vectors));
                symmetrize(&mut h);
                for i in 0..s {
                    for j in 0..s {
                        let gamma = if g[i] != 0.0 && g[j] != 0.0 {
                            -g[i] * g[j]
                        } else if g[i] == 0.0 && g[j] == 0.0 {
                            0.0
                        } else {
                            (g[i] - g[j]) / (values[i] - values[j])
                        };
                        h[(i, j)] *= gamma;
                    }
                }
                LowRankDerivative::new(0.0, basis.clone(), m, h)
            }
            DerivRecipe::FrozenBasis { basis } => {
                let cols = map_indexed(basis.ncols(), |k| op.deriv_matvec(which, &basis.column(k).into_owned()));
                let dv = DMatrix::from_columns(&cols.into_iter().collect::<Result<Vec<_>>>()?);
                let mut h = basis.tr_mul(&dv);
                symmetrize(&mut h);
                LowRankDerivative::new(0.0, basis.clone(), DMatrix::zeros(n, basis.ncols()), h)
            }
            DerivRecipe::Features(map) => {
                let m = map.derivative(op.data(), op.spec(), op.params(), which)?;
                let k = m.ncols();
                LowRankDerivative::new(0.0, self.factor.clone(), m, DMatrix::zeros(k, k))
            }
        }
    }
}

fn symmetrize(h: &mut DMatrix<f64>) {
    let t = h.transpose();
    *h += t;
    *h *= 0.5;
}

impl LinearOperator for DiagPlusLowRank {
    fn dim(&self) -> usize {
        self.n()
    }
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_vec(v)
    }
}

impl Preconditioner for DiagPlusLowRank {
    fn size(&self) -> usize {
        self.n()
    }
    fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        self.solve_vec(r)
    }
}

impl SpdPreconditioner for DiagPlusLowRank {
    fn sqrt_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.function_apply(MatrixFunction::Sqrt, v)
    }

    fn logdet(&self) -> Result<f64> {
        Ok(self.logdet)
    }

    /// `σ⁻² Σᵢ Dᵢᵢ − σ⁻² 1ᵀ[(L (σ²I + LᵀL)⁻¹) ∘ (D L)]1`.
    fn trace_inv_deriv(&self, dp: &dyn DerivOperator) -> Result<f64> {
        let n = self.n();
        if dp.dim() != n {
            return invalid(format!("derivative operator has dimension {}, expected {n}", dp.dim()));
        }
        let diag_sum: f64 = dp.diag_vec().iter().sum();
        let mut correction = 0.0;
        if self.rank() > 0 {
            let a = self.inner.solve(&self.work.transpose());
            let dl = map_indexed(self.work.ncols(), |k| dp.apply(&self.work.column(k).into_owned()));
            for (k, col) in dl.iter().enumerate() {
                let arow: Vec<f64> = a.row(k).iter().copied().collect();
                correction += dot(&arow, col.as_slice());
            }
        }
        let t = (diag_sum - correction) / self.noise;
        if !t.is_finite() {
            return Err(GpError::Numerical("non-finite preconditioner trace term".into()));
        }
        Ok(t)
    }
}

/// `∂P̂/∂θ = c I + M Bᵀ + B Mᵀ + B H Bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankDerivative {
    pub diag_shift: f64,
    pub basis: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl LowRankDerivative {
    pub fn new(diag_shift: f64, basis: DMatrix<f64>, m: DMatrix<f64>, h: DMatrix<f64>) -> Result<Self> {
        let (n, k) = basis.shape();
        if m.shape() != (n, k) || h.shape() != (k, k) {
            return invalid("low-rank derivative blocks have inconsistent shapes");
        }
        Ok(LowRankDerivative { diag_shift, basis, m, h })
    }

    pub fn scaled_identity(n: usize, c: f64) -> Self {
        LowRankDerivative { diag_shift: c, basis: DMatrix::zeros(n, 0), m: DMatrix::zeros(n, 0), h: DMatrix::zeros(0, 0) }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.basis.nrows();
        let mb = &self.m * self.basis.transpose();
        DMatrix::identity(n, n) * self.diag_shift + &mb + mb.transpose() + &self.basis * &self.h * self.basis.transpose()
    }
}

impl LinearOperator for LowRankDerivative {
    fn dim(&self) -> usize {
        self.basis.nrows()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v * self.diag_shift;
        if self.basis.ncols() > 0 {
            let bv = self.basis.tr_mul(v);
            let mv = self.m.tr_mul(v);
            let t = &self.h * &bv + mv;
            out.gemv(1.0, &self.m, &bv, 1.0);
            out.gemv(1.0, &self.basis, &t, 1.0);
        }
        out
    }
}

impl DerivOperator for LowRankDerivative {
    fn diag_vec(&self) -> DVector<f64> {
        let n = self.basis.nrows();
        let bh = &self.basis * &self.h;
        DVector::from_fn(n, |i, _| {
            let mut d = self.diag_shift;
            for k in 0..self.basis.ncols() {
                d += self.basis[(i, k)] * (2.0 * self.m[(i, k)] + bh[(i, k)]);
            }
            d
        })
    }
}

/// Which builder to use, with its tuning knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrecondSpec {
    Identity,
    PivotedCholesky { diag_tol: f64 },
    TruncatedSvd { dense_limit: usize },
    RandomizedSvd { oversample: usize, power_iters: usize },
    Nystroem { sample_ratio: f64, probabilities: SamplingProbabilities },
    Rff,
    Qff,
}

impl PrecondSpec {
    pub fn kind(&self) -> PrecondKind {
        match self {
            PrecondSpec::Identity => PrecondKind::Identity,
            PrecondSpec::PivotedCholesky { .. } => PrecondKind::PivotedCholesky,
            PrecondSpec::TruncatedSvd { .. } => PrecondKind::TruncatedSvd,
            PrecondSpec::RandomizedSvd { .. } => PrecondKind::RandomizedSvd,
            PrecondSpec::Nystroem { .. } => PrecondKind::Nystroem,
            PrecondSpec::Rff => PrecondKind::Rff,
            PrecondSpec::Qff => PrecondKind::Qff,
        }
    }

    /// Defaults for each kind.
    pub fn default_for(kind: PrecondKind) -> Self {
        match kind {
            PrecondKind::Identity | PrecondKind::Custom => PrecondSpec::Identity,
            PrecondKind::PivotedCholesky => PrecondSpec::PivotedCholesky { diag_tol: 1e-12 },
            PrecondKind::TruncatedSvd => PrecondSpec::TruncatedSvd { dense_limit: 4096 },
            PrecondKind::RandomizedSvd => PrecondSpec::RandomizedSvd { oversample: 10, power_iters: 1 },
            PrecondKind::Nystroem => {
                PrecondSpec::Nystroem { sample_ratio: 2.0, probabilities: SamplingProbabilities::Uniform }
            }
            PrecondKind::Rff => PrecondSpec::Rff,
            PrecondKind::Qff => PrecondSpec::Qff,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let kind = match name {
            "none" | "identity" => PrecondKind::Identity,
            "pivchol" | "pivoted_cholesky" | "cholesky" => PrecondKind::PivotedCholesky,
            "svd" | "truncated_svd" => PrecondKind::TruncatedSvd,
            "rsvd" | "randomized_svd" => PrecondKind::RandomizedSvd,
            "nystroem" | "nystrom" => PrecondKind::Nystroem,
            "rff" => PrecondKind::Rff,
            "qff" => PrecondKind::Qff,
            other => return invalid(format!("unknown preconditioner '{other}'")),
        };
        Ok(Self::default_for(kind))
    }
}

/// Build `P̂_ℓ` for the kernel matrix behind `op`; rank 0 gives `σ² I`.
///
/// `diag_tol` for pivoted Cholesky is relative to the largest diagonal entry.
pub fn build_preconditioner(op: &KernelOperator, spec: &PrecondSpec, rank: usize, seed: u64) -> Result<DiagPlusLowRank> {
    let n = op.n();
    let noise = op.noise();
    if rank == 0 || matches!(spec, PrecondSpec::Identity) {
        return DiagPlusLowRank::identity(n, noise);
    }
    if rank > n && !matches!(spec, PrecondSpec::Rff | PrecondSpec::Qff) {
        return invalid(format!("rank {rank} exceeds n = {n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = spec.kind();
    match *spec {
        PrecondSpec::Identity => unreachable!(),
        PrecondSpec::PivotedCholesky { diag_tol } => {
            let kmax = op.diagonal().max();
            let pc = pivoted_cholesky(op, rank, diag_tol * kmax)?;
            let g = pc.pivot_block_inverse_t()?;
            let pivots = pc.pivots.clone();
            DiagPlusLowRank::with_recipe(
                noise,
                pc.factor,
                kind,
                Some(pivots.clone()),
                DerivRecipe::Columns { indices: pivots, g, diag_tol },
            )
        }
        PrecondSpec::TruncatedSvd { dense_limit } => {
            if n > dense_limit {
                return invalid(format!("truncated SVD needs n <= {dense_limit}, got {n}"));
            }
            let e = truncated_svd(&op.dense_kernel(), rank)?;
            DiagPlusLowRank::with_recipe(noise, e.factor, kind, None, DerivRecipe::FrozenBasis { basis: e.basis })
        }
        PrecondSpec::RandomizedSvd { oversample, power_iters } => {
            let kop = svd::NoiseFree(op);
            let e = randomized_svd(&kop, rank, oversample, power_iters, &mut rng)?;
            DiagPlusLowRank::with_recipe(noise, e.factor, kind, None, DerivRecipe::FrozenBasis { basis: e.basis })
        }
        PrecondSpec::Nystroem { sample_ratio, probabilities } => {
            if !(sample_ratio >= 1.0) {
                return invalid("Nystroem sample_ratio must be at least 1");
            }
            let s = ((rank as f64 * sample_ratio).ceil() as usize).min(n);
            let f = nystroem(op, rank, s, probabilities, &mut rng)?;
            let mut g = vec![0.0; s];
            for &i in &f.kept {
                g[i] = 1.0 / f.core_values[i];
            }
            let cols = map_indexed(s, |j| op.column(f.indices[j]));
            let basis = DMatrix::from_columns(&cols) * &f.core_vectors;
            let recipe = DerivRecipe::TruncatedCore {
                indices: f.indices,
                basis,
                vectors: f.core_vectors,
                values: f.core_values,
                g,
            };
            DiagPlusLowRank::with_recipe(noise, f.factor, kind, None, recipe)
        }
        PrecondSpec::Rff => {
            let map = rff_map(op.spec(), op.input_dim(), rank, &mut rng)?;
            let factor = map.features(op.data(), op.spec(), op.params())?;
            DiagPlusLowRank::with_recipe(noise, factor, kind, None, DerivRecipe::Features(map))
        }
        PrecondSpec::Qff => {
            let map = qff_map(op.spec(), op.input_dim(), rank)?;
            let factor = map.features(op.data(), op.spec(), op.params())?;
            DiagPlusLowRank::with_recipe(noise, factor, kind, None, DerivRecipe::Features(map))
        }
    }
}
