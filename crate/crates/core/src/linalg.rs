//! Small dense helpers and the operator abstraction shared by the solvers.

use nalgebra::{DMatrix, DVector};

/// Symmetric linear operator accessed only through products.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;

    fn apply(&self, v: &DVector<f64>) -> DVector<f64>;
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        symmetric_matvec(self, v)
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        (**self).apply(v)
    }
}

/// A linear operator whose diagonal is also available, as needed for
/// `tr(P̂⁻¹ ∂P̂/∂θ)`.
pub trait DerivOperator: LinearOperator {
    fn diag_vec(&self) -> DVector<f64>;
}

impl DerivOperator for DMatrix<f64> {
    fn diag_vec(&self) -> DVector<f64> {
        self.diagonal()
    }
}

impl<T: DerivOperator + ?Sized> DerivOperator for &T {
    fn diag_vec(&self) -> DVector<f64> {
        (**self).diag_vec()
    }
}

/// Access to the diagonal and single columns of a symmetric matrix.
pub trait ColumnAccess: Sync {
    fn size(&self) -> usize;
    fn diag_vec(&self) -> DVector<f64>;
    fn column_vec(&self, j: usize) -> DVector<f64>;
}

impl ColumnAccess for DMatrix<f64> {
    fn size(&self) -> usize {
        self.nrows()
    }
    fn diag_vec(&self) -> DVector<f64> {
        self.diagonal()
    }
    fn column_vec(&self, j: usize) -> DVector<f64> {
        self.column(j).into_owned()
    }
}

/// Dot product with a fixed eight-way accumulation order.
///
/// The order depends only on the length, so the same pair of slices always
/// gives the same bits regardless of how callers split the work.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `A v` for a symmetric column-major `A`, computed as column dots so every
/// output entry is independent (and parallelizable without changing bits).
pub fn symmetric_matvec(a: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    assert_eq!(n, v.len());
    let mut out = vec![0.0; n];
    let data = a.as_slice();
    let vs = v.as_slice();
    crate::parallel::fill_chunks(&mut out, 64, |start, chunk| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let i = start + k;
            *o = dot(&data[i * n..(i + 1) * n], vs);
        }
    });
    DVector::from_vec(out)
}

/// Frobenius norm of a dense matrix.
pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mirror the upper triangle into the lower one.
pub fn symmetrize_upper(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            a[(i, j)] = a[(j, i)];
        }
    }
}

pub(crate) fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..21).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..21).map(|i| 1.0 - i as f64 * 0.1).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn symmetric_matvec_matches_nalgebra() {
        let a = DMatrix::from_fn(13, 13, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let v = DVector::from_fn(13, |i, _| (i as f64).sin());
        let got = symmetric_matvec(&a, &v);
        let want = &a * &v;
        assert!((got - want).norm() < 1e-13);
    }
}
