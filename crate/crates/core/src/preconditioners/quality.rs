use nalgebra::DMatrix;

use super::{DiagPlusLowRank, MatrixFunction};
use crate::error::{invalid, Result};
use crate::linalg::frobenius;
use crate::oracle::DenseSpd;

/// Relative Frobenius error `‖K̂ − P̂_ℓ‖_F / ‖K̂‖_F` per rank.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityCurve {
    pub ranks: Vec<usize>,
    pub rel_frobenius: Vec<f64>,
}

pub fn quality_curve<F>(k_hat: &DMatrix<f64>, mut build: F, ranks: &[usize]) -> Result<QualityCurve>
where
    F: FnMut(usize) -> Result<DiagPlusLowRank>,
{
    let norm = frobenius(k_hat);
    if !(norm > 0.0) {
        return invalid("quality curve needs a nonzero matrix");
    }
    let mut rel = Vec::with_capacity(ranks.len());
    for &r in ranks {
        let p = build(r)?;
        if p.n() != k_hat.nrows() {
            return invalid("preconditioner size does not match the matrix");
        }
        rel.push(frobenius(&(k_hat - p.dense())) / norm);
    }
    Ok(QualityCurve { ranks: ranks.to_vec(), rel_frobenius: rel })
}

/// `‖f(K̂) − f(P̂)‖_F / ‖f(K̂)‖_F`, with `f(K̂)` from the dense oracle.
pub fn function_error(k_hat: &DenseSpd, p: &DiagPlusLowRank, f: MatrixFunction) -> Result<f64> {
    let fk = k_hat.matrix_function(|x| f.eval(x));
    let denom = frobenius(&fk);
    if !(denom > 0.0) {
        return invalid("f(K̂) vanishes; relative error undefined");
    }
    Ok(frobenius(&(fk - p.dense_function(f))) / denom)
}
