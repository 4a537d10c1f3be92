use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::Rng;

use crate::error::{invalid, GpError, Result};
use crate::linalg::ColumnAccess;
use crate::parallel::map_indexed;

/// Column sampling distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingProbabilities {
    Uniform,
    /// `pᵢ ∝ Kᵢᵢ²`.
    DiagonalWeighted,
}

/// `C W_ℓ⁺ Cᵀ = L Lᵀ` with `L = C G`.
#[derive(Debug, Clone, PartialEq)]
pub struct NystroemFactor {
    pub factor: DMatrix<f64>,
    /// Sampled column indices (distinct, ascending).
    pub indices: Vec<usize>,
    pub g: DMatrix<f64>,
    /// Full eigendecomposition of the core `W = K[indices, indices]`.
    pub core_vectors: DMatrix<f64>,
    pub core_values: DVector<f64>,
    /// Positions in `core_values` retained in the pseudo-inverse.
    pub kept: Vec<usize>,
}

/// Randomized Nyström approximation from `samples` distinct columns, truncated
/// to the top `rank` eigenpairs of the core; eigenvalues below `1e-10` times
/// the largest are dropped from the pseudo-inverse.
pub fn nystroem<K: ColumnAccess + ?Sized, R: Rng>(
    k: &K,
    rank: usize,
    samples: usize,
    probabilities: SamplingProbabilities,
    rng: &mut R,
) -> Result<NystroemFactor> {
    let n = k.size();
    if samples < rank || samples > n || rank == 0 {
        return invalid(format!("Nystroem needs 1 <= rank <= samples <= n, got rank {rank}, samples {samples}, n {n}"));
    }
    let mut indices = match probabilities {
        SamplingProbabilities::Uniform => index::sample(rng, n, samples).into_vec(),
        SamplingProbabilities::DiagonalWeighted => {
            let d = k.diag_vec();
            index::sample_weighted(rng, n, |i| d[i] * d[i], samples)
                .map_err(|e| GpError::InvalidInput(format!("Nystroem sampling weights: {e}")))?
                .into_vec()
        }
    };
    indices.sort_unstable();
    let cols = map_indexed(indices.len(), |j| k.column_vec(indices[j]));
    nystroem_from_columns(DMatrix::from_columns(&cols), indices, rank)
}

/// Nyström factor from the sampled columns `c = K[:, indices]`.
pub(crate) fn nystroem_from_columns(c: DMatrix<f64>, indices: Vec<usize>, rank: usize) -> Result<NystroemFactor> {
    let samples = indices.len();
    let mut w = c.select_rows(indices.iter());
    let wt = w.transpose();
    w += wt;
    w *= 0.5;
    let eig = SymmetricEigen::new(w);
    let hi = eig.eigenvalues.max();
    if !(hi > 0.0) {
        return Err(GpError::Numerical("Nystroem core matrix is zero".into()));
    }
    let mut order: Vec<usize> = (0..samples).filter(|&i| eig.eigenvalues[i] > 1e-10 * hi).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    order.truncate(rank);
    let mut g = eig.eigenvectors.select_columns(order.iter());
    for (j, mut col) in g.column_iter_mut().enumerate() {
        col /= eig.eigenvalues[order[j]].sqrt();
    }
    let factor = &c * &g;
    Ok(NystroemFactor { factor, indices, g, core_vectors: eig.eigenvectors, core_values: eig.eigenvalues, kept: order })
}
