use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, GpError, Result};
use crate::kernels::KernelOperator;
use crate::linalg::LinearOperator;
use crate::parallel::map_indexed;

/// Top eigenpairs of a PSD matrix in factor form `L = V Λ^{1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankEigen {
    pub factor: DMatrix<f64>,
    /// Orthonormal `V`.
    pub basis: DMatrix<f64>,
    /// Descending.
    pub values: DVector<f64>,
}

/// Noise-free `K` of a kernel operator.
pub(crate) struct NoiseFree<'a>(pub &'a KernelOperator);

impl LinearOperator for NoiseFree<'_> {
    fn dim(&self) -> usize {
        self.0.n()
    }
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.0.kernel_only_matvec(v)
    }
}

fn top_eigen(eig: SymmetricEigen<f64, nalgebra::Dyn>, basis_of: impl Fn(&DMatrix<f64>) -> DMatrix<f64>, rank: usize) -> Result<LowRankEigen> {
    let vals = &eig.eigenvalues;
    let hi = vals.max();
    let lo = vals.min();
    if lo < -1e-10 * hi.abs().max(f64::MIN_POSITIVE) {
        return Err(GpError::Numerical(format!("matrix is not positive semidefinite (eigenvalue {lo}, largest {hi})")));
    }
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    order.truncate(rank);
    let v = eig.eigenvectors.select_columns(order.iter());
    let basis = basis_of(&v);
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| vals[i].max(0.0)));
    let mut factor = basis.clone();
    for (j, mut col) in factor.column_iter_mut().enumerate() {
        col *= values[j].sqrt();
    }
    Ok(LowRankEigen { factor, basis, values })
}

/// Best rank-`rank` approximation of the dense symmetric PSD `k`.
pub fn truncated_svd(k: &DMatrix<f64>, rank: usize) -> Result<LowRankEigen> {
    if !k.is_square() || rank > k.nrows() {
        return invalid(format!("truncated SVD rank {rank} invalid for a {}x{} matrix", k.nrows(), k.ncols()));
    }
    top_eigen(SymmetricEigen::new(k.clone()), |v| v.clone(), rank)
}

/// Sketch-then-eigendecompose randomized SVD with `rank + oversample`
/// Gaussian test vectors and `power_iters` subspace iterations.
pub fn randomized_svd<A: LinearOperator + ?Sized, R: Rng>(
    k: &A,
    rank: usize,
    oversample: usize,
    power_iters: usize,
    rng: &mut R,
) -> Result<LowRankEigen> {
    let n = k.dim();
    if rank > n {
        return invalid(format!("randomized SVD rank {rank} exceeds n = {n}"));
    }
    let s = (rank + oversample).min(n);
    let omega = DMatrix::from_fn(n, s, |_, _| rng.sample::<f64, _>(StandardNormal));
    let apply_cols = |m: &DMatrix<f64>| {
        let cols = map_indexed(m.ncols(), |j| k.apply(&m.column(j).into_owned()));
        DMatrix::from_columns(&cols)
    };
    let mut q = apply_cols(&omega).qr().q();
    for _ in 0..power_iters {
        q = apply_cols(&q).qr().q();
    }
    let kq = apply_cols(&q);
    let mut b = q.tr_mul(&kq);
    let bt = b.transpose();
    b += bt;
    b *= 0.5;
    if !b.iter().all(|x| x.is_finite()) {
        return Err(GpError::Numerical("non-finite randomized SVD sketch".into()));
    }
    top_eigen(SymmetricEigen::new(b), |w| &q * w, rank)
}
