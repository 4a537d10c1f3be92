use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, GpError, Result};
use crate::linalg::ColumnAccess;

/// Greedy pivoted partial Cholesky factor `K ≈ L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialCholesky {
    /// `n × r`, with `r` the achieved rank.
    pub factor: DMatrix<f64>,
    pub pivots: Vec<usize>,
    /// Diagonal of the Schur complement `K − L Lᵀ`.
    pub remaining_diag: DVector<f64>,
}

impl PartialCholesky {
    pub fn rank(&self) -> usize {
        self.pivots.len()
    }

    /// `L_S^{-T}` where `L_S` holds the pivot rows of the factor, so that
    /// `L = K[:, pivots] L_S^{-T}`.
    pub fn pivot_block_inverse_t(&self) -> Result<DMatrix<f64>> {
        let r = self.rank();
        let ls = self.factor.select_rows(self.pivots.iter());
        ls.transpose()
            .solve_upper_triangular(&DMatrix::identity(r, r))
            .ok_or_else(|| GpError::Numerical("singular pivot block in partial Cholesky".into()))
    }
}

/// Rank-`rank` pivoted Cholesky of the symmetric PSD matrix behind `k`.
///
/// Each step takes the largest remaining diagonal entry (lowest index on
/// ties) and stops early once it is `≤ diag_tol`.
pub fn pivoted_cholesky<K: ColumnAccess + ?Sized>(k: &K, rank: usize, diag_tol: f64) -> Result<PartialCholesky> {
    partial_cholesky(k, rank, diag_tol, None)
}

/// Partial Cholesky that takes its pivots from `order` instead of searching,
/// stopping at the first one whose remaining diagonal is `≤ diag_tol`.
pub fn cholesky_in_order<K: ColumnAccess + ?Sized>(k: &K, order: &[usize], diag_tol: f64) -> Result<PartialCholesky> {
    let n = k.size();
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return invalid(format!("pivot order must hold distinct indices below {n}"));
        }
    }
    partial_cholesky(k, order.len(), diag_tol, Some(order))
}

fn partial_cholesky<K: ColumnAccess + ?Sized>(k: &K, rank: usize, diag_tol: f64, order: Option<&[usize]>) -> Result<PartialCholesky> {
    let n = k.size();
    if rank > n {
        return invalid(format!("pivoted Cholesky rank {rank} exceeds n = {n}"));
    }
    if !(diag_tol >= 0.0) {
        return invalid("diag_tol must be non-negative");
    }
    let mut d = k.diag_vec();
    let kmax = d.max();
    if d.iter().any(|&x| !x.is_finite()) || d.min() < -1e-10 * kmax.abs() {
        return Err(GpError::Numerical("matrix diagonal is negative or non-finite".into()));
    }
    let mut factor = DMatrix::<f64>::zeros(n, rank);
    let mut pivots = Vec::with_capacity(rank);
    let mut done = vec![false; n];
    for step in 0..rank {
        let (mut p, mut best) = (0, f64::NEG_INFINITY);
        if let Some(order) = order {
            p = order[step];
            best = d[p];
        } else {
            for (i, &v) in d.iter().enumerate() {
                if !done[i] && v > best {
                    best = v;
                    p = i;
                }
            }
        }
        if best <= diag_tol {
            break;
        }
        let root = best.sqrt();
        let mut col = k.column_vec(p);
        if step > 0 {
            let prev = factor.columns(0, step);
            let lp = prev.row(p).transpose();
            col.gemv(-1.0, &prev, &lp, 1.0);
        }
        col /= root;
        for (i, &is_done) in done.iter().enumerate() {
            if is_done {
                col[i] = 0.0;
            }
        }
        col[p] = root;
        for i in 0..n {
            d[i] -= col[i] * col[i];
        }
        d[p] = 0.0;
        done[p] = true;
        if let Some(i) = d.iter().position(|&x| x < -1e-10 * kmax) {
            return Err(GpError::Numerical(format!(
                "negative Schur complement diagonal {} at index {i}: matrix is not positive semidefinite",
                d[i]
            )));
        }
        d.iter_mut().for_each(|x| *x = x.max(0.0));
        factor.set_column(step, &col);
        pivots.push(p);
    }
    let r = pivots.len();
    let factor = if r < rank { factor.columns(0, r).into_owned() } else { factor };
    Ok(PartialCholesky { factor, pivots, remaining_diag: d })
}
