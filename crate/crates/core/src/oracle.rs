//! Dense reference computations.
//!
//! Every quantity is computed along two independent routes (Cholesky and
//! symmetric eigendecomposition); if they disagree beyond `1e-9` relative the
//! oracle reports a numerical error instead of a number.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{invalid, GpError, Result};
use crate::krylov::Preconditioner;
use crate::linalg::{DerivOperator, LinearOperator};
use crate::parallel::map_indexed;
use crate::preconditioners::SpdPreconditioner;

const ROUTE_TOL: f64 = 1e-9;

/// A dense symmetric positive definite matrix with both factorizations cached.
#[derive(Debug, Clone)]
pub struct DenseSpd {
    a: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    values: DVector<f64>,
    vectors: DMatrix<f64>,
}

fn routes_agree(what: &str, a: f64, b: f64, scale: f64) -> Result<f64> {
    if (a - b).abs() <= ROUTE_TOL * scale.max(f64::MIN_POSITIVE) {
        Ok(a)
    } else {
        Err(GpError::Numerical(format!("oracle routes disagree for {what}: {a} vs {b}")))
    }
}

impl DenseSpd {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return invalid("oracle needs a non-empty square matrix");
        }
        if !a.iter().all(|x| x.is_finite()) {
            return invalid("oracle matrix has non-finite entries");
        }
        let amax = a.amax();
        if (&a - a.transpose()).amax() > 1e-12 * amax {
            return invalid("oracle matrix is not symmetric");
        }
        let eig = SymmetricEigen::new(a.clone());
        let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
        if lo <= 0.0 || lo < -1e-10 * hi {
            return Err(GpError::Numerical(format!("oracle matrix not positive definite (eigenvalues in [{lo}, {hi}])")));
        }
        let chol = Cholesky::new(a.clone()).ok_or_else(|| GpError::Numerical("oracle Cholesky failed".into()))?;
        Ok(DenseSpd { a, chol, values: eig.eigenvalues, vectors: eig.eigenvectors })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn condition_number(&self) -> f64 {
        self.values.max() / self.values.min()
    }

    pub fn logdet(&self) -> Result<f64> {
        let by_chol = 2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let by_eig: f64 = self.values.iter().map(|l| l.ln()).sum();
        let scale: f64 = self.values.iter().map(|l| l.ln().abs()).sum::<f64>() + self.n() as f64 * 1e-7;
        routes_agree("log det", by_chol, by_eig, scale)
    }

    /// `V f(Λ) Vᵀ`.
    pub fn matrix_function(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let fl = self.values.map(f);
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= fl[j];
        }
        let mut out = scaled * self.vectors.transpose();
        crate::linalg::symmetrize_upper(&mut out);
        out
    }

    pub fn matrix_log(&self) -> DMatrix<f64> {
        self.matrix_function(f64::ln)
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `zᵀ f(A) z` from the eigendecomposition.
    pub fn quadratic_form(&self, z: &DVector<f64>, f: impl Fn(f64) -> f64) -> f64 {
        let c = self.vectors.tr_mul(z);
        c.iter().zip(self.values.iter()).map(|(c, &l)| c * c * f(l)).sum()
    }

    /// `tr(A⁻¹ D)` by Cholesky solves, cross-checked as `Σ vᵢᵀ D vᵢ / λᵢ`.
    pub fn trace_inv_deriv(&self, d: &DMatrix<f64>) -> Result<f64> {
        if d.shape() != self.a.shape() {
            return invalid("derivative matrix shape does not match");
        }
        let x = self.chol.solve(d);
        let by_chol = x.trace();
        let vd = d * &self.vectors;
        let terms: Vec<f64> = (0..self.n()).map(|i| self.vectors.column(i).dot(&vd.column(i)) / self.values[i]).collect();
        let by_eig: f64 = terms.iter().sum();
        let scale: f64 = terms.iter().map(|t| t.abs()).sum();
        routes_agree("tr(A⁻¹D)", by_chol, by_eig, scale)
    }
}

pub fn dense_logdet(a: &DMatrix<f64>) -> Result<f64> {
    DenseSpd::new(a.clone())?.logdet()
}

pub fn dense_matrix_log(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(DenseSpd::new(a.clone())?.matrix_log())
}

pub fn dense_trace_inv_deriv(a: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<f64> {
    DenseSpd::new(a.clone())?.trace_inv_deriv(d)
}

/// A dense matrix used as a preconditioner, e.g. `P̂ = K̂` in collapse tests.
#[derive(Debug, Clone)]
pub struct DensePreconditioner {
    spd: DenseSpd,
    sqrt: DMatrix<f64>,
}

impl DensePreconditioner {
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        let spd = DenseSpd::new(p)?;
        let sqrt = spd.matrix_function(f64::sqrt);
        Ok(DensePreconditioner { spd, sqrt })
    }

    pub fn spd(&self) -> &DenseSpd {
        &self.spd
    }
}

impl LinearOperator for DensePreconditioner {
    fn dim(&self) -> usize {
        self.spd.n()
    }
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.spd.matrix() * v
    }
}

impl Preconditioner for DensePreconditioner {
    fn size(&self) -> usize {
        self.spd.n()
    }
    fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        self.spd.solve(r)
    }
}

impl SpdPreconditioner for DensePreconditioner {
    fn sqrt_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.sqrt * v
    }

    fn logdet(&self) -> Result<f64> {
        self.spd.logdet()
    }

    fn trace_inv_deriv(&self, dp: &dyn DerivOperator) -> Result<f64> {
        let n = self.spd.n();
        if dp.dim() != n {
            return invalid("derivative operator dimension mismatch");
        }
        let cols = map_indexed(n, |j| dp.apply(&DVector::from_fn(n, |i, _| if i == j { 1.0 } else { 0.0 })));
        let d = DMatrix::from_columns(&cols);
        self.spd.trace_inv_deriv(&d)
    }
}
