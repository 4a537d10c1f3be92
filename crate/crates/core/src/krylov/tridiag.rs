use crate::error::{GpError, Result};

/// Symmetric tridiagonal matrix stored as its diagonal and first off-diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTridiagonal {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

/// Eigenvalues of a [`SymTridiagonal`] (ascending) with the squared first
/// components of the matching unit eigenvectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagEigen {
    pub values: Vec<f64>,
    pub first_components_sq: Vec<f64>,
}

impl SymTridiagonal {
    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Result<Self> {
        if !diag.is_empty() && off.len() + 1 != diag.len() || diag.is_empty() && !off.is_empty() {
            return Err(GpError::InvalidInput(format!(
                "tridiagonal with {} diagonal entries needs {} off-diagonal entries, got {}",
                diag.len(),
                diag.len().saturating_sub(1),
                off.len()
            )));
        }
        Ok(SymTridiagonal { diag, off })
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.len();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            if i + 1 < n {
                m[(i, i + 1)] = self.off[i];
                m[(i + 1, i)] = self.off[i];
            }
        }
        m
    }

    /// Implicit QL with Wilkinson-type shifts. Only the first row of the
    /// eigenvector matrix is accumulated, which is all Gauss quadrature needs.
    pub fn eigen(&self) -> Result<TridiagEigen> {
        let n = self.len();
        if n == 0 {
            return Ok(TridiagEigen { values: vec![], first_components_sq: vec![] });
        }
        if self.diag.iter().chain(&self.off).any(|x| !x.is_finite()) {
            return Err(GpError::Numerical("tridiagonal matrix has non-finite entries".into()));
        }
        let mut d = self.diag.clone();
        let mut e = vec![0.0; n];
        e[..n - 1].copy_from_slice(&self.off);
        let mut z = vec![0.0; n];
        z[0] = 1.0;

        let eps = f64::EPSILON;
        let mut f = 0.0;
        let mut tst1: f64 = 0.0;
        let max_sweeps = 60 * n.max(1);
        let mut sweeps = 0;
        for l in 0..n {
            tst1 = tst1.max(d[l].abs() + e[l].abs());
            let mut m = l;
            while m < n - 1 && e[m].abs() > eps * tst1 {
                m += 1;
            }
            if m > l {
                loop {
                    sweeps += 1;
                    if sweeps > max_sweeps {
                        return Err(GpError::Numerical("tridiagonal eigensolver did not converge".into()));
                    }
                    let g = d[l];
                    let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                    let mut r = p.hypot(1.0);
                    if p < 0.0 {
                        r = -r;
                    }
                    d[l] = e[l] / (p + r);
                    d[l + 1] = e[l] * (p + r);
                    let dl1 = d[l + 1];
                    let h = g - d[l];
                    for di in d.iter_mut().skip(l + 2) {
                        *di -= h;
                    }
                    f += h;

                    p = d[m];
                    let mut c = 1.0;
                    let mut c2 = c;
                    let mut c3 = c;
                    let el1 = e[l + 1];
                    let mut s = 0.0;
                    let mut s2 = 0.0;
                    for i in (l..m).rev() {
                        c3 = c2;
                        c2 = c;
                        s2 = s;
                        let g = c * e[i];
                        let h = c * p;
                        r = p.hypot(e[i]);
                        e[i + 1] = s * r;
                        s = e[i] / r;
                        c = p / r;
                        p = c * d[i] - s * g;
                        d[i + 1] = h + s * (c * g + s * d[i]);
                        let zh = z[i + 1];
                        z[i + 1] = s * z[i] + c * zh;
                        z[i] = c * z[i] - s * zh;
                    }
                    p = -s * s2 * c3 * el1 * e[l] / dl1;
                    e[l] = s * p;
                    d[l] = c * p;
                    if e[l].abs() <= eps * tst1 {
                        break;
                    }
                }
            }
            d[l] += f;
            e[l] = 0.0;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
        Ok(TridiagEigen {
            values: order.iter().map(|&i| d[i]).collect(),
            first_components_sq: order.iter().map(|&i| z[i] * z[i]).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    #[test]
    fn one_by_one() {
        let t = SymTridiagonal::new(vec![3.5], vec![]).unwrap();
        let e = t.eigen().unwrap();
        assert_eq!(e.values, vec![3.5]);
        assert_eq!(e.first_components_sq, vec![1.0]);
    }

    #[test]
    fn two_by_two_closed_form() {
        // [[2, 1], [1, 2]] has eigenvalues 1, 3 with eigenvectors (1, ∓1)/√2.
        let t = SymTridiagonal::new(vec![2.0, 2.0], vec![1.0]).unwrap();
        let e = t.eigen().unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-15 && (e.values[1] - 3.0).abs() < 1e-15);
        assert!((e.first_components_sq[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bad_shape_rejected() {
        assert!(SymTridiagonal::new(vec![1.0, 2.0], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn matches_dense_symmetric_eigen(
            diag in prop::collection::vec(-5.0f64..5.0, 1..40),
            seed in prop::collection::vec(-2.0f64..2.0, 40),
        ) {
            let n = diag.len();
            let off: Vec<f64> = seed[..n - 1].to_vec();
            let t = SymTridiagonal::new(diag, off).unwrap();
            let e = t.eigen().unwrap();
            let dense = SymmetricEigen::new(t.to_dense());
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| dense.eigenvalues[a].total_cmp(&dense.eigenvalues[b]));
            let scale = dense.eigenvalues.amax().max(1.0);
            for (k, &i) in idx.iter().enumerate() {
                prop_assert!((e.values[k] - dense.eigenvalues[i]).abs() < 1e-12 * scale);
            }
            let wsum: f64 = e.first_components_sq.iter().sum();
            prop_assert!((wsum - 1.0).abs() < 1e-12);
            // Quadrature of a smooth function is insensitive to how degenerate
            // eigenvectors are split, so compare e₁ᵀ exp(T/scale) e₁.
            let want: f64 = (0..n).map(|i| dense.eigenvectors[(0, i)].powi(2) * (dense.eigenvalues[i] / scale).exp()).sum();
            let got: f64 = e.values.iter().zip(&e.first_components_sq).map(|(v, w)| w * (v / scale).exp()).sum();
            prop_assert!((got - want).abs() < 1e-12 * want.abs().max(1.0));
        }
    }
}
