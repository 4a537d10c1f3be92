use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{invalid, GpError, Result};
use crate::kernels::{HyperIndex, Hyperparameters, KernelFamily, KernelSpec};
use crate::krylov::SymTridiagonal;

/// Cosine features `φ_k(x) = o·a_k·cos(ω_kᵀ(x / l) + b_k)` with frequencies
/// drawn for unit lengthscale, so that `φ(x)ᵀφ(y) ≈ k(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub amplitude: Vec<f64>,
    /// `ℓ × d`.
    pub omega: DMatrix<f64>,
    pub phase: Vec<f64>,
}

impl FeatureMap {
    pub fn len(&self) -> usize {
        self.amplitude.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitude.is_empty()
    }

    fn check(&self, x: &DMatrix<f64>, spec: &KernelSpec, params: &Hyperparameters) -> Result<Vec<f64>> {
        let d = x.ncols();
        if self.omega.ncols() != d {
            return invalid(format!("feature map built for d = {}, data has d = {d}", self.omega.ncols()));
        }
        let ls = params.lengthscales();
        if ls.len() != spec.num_lengthscales(d) {
            return invalid("lengthscale count does not match the data");
        }
        Ok((0..d).map(|j| if spec.ard { ls[j] } else { ls[0] }).collect())
    }

    fn arguments(&self, x: &DMatrix<f64>, ls: &[f64]) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] / ls[j]);
        let mut arg = scaled * self.omega.transpose();
        for (k, mut col) in arg.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.phase[k]);
        }
        arg
    }

    /// `n × ℓ` feature matrix.
    pub fn features(&self, x: &DMatrix<f64>, spec: &KernelSpec, params: &Hyperparameters) -> Result<DMatrix<f64>> {
        let ls = self.check(x, spec, params)?;
        let o = params.outputscale();
        let mut arg = self.arguments(x, &ls);
        for (k, mut col) in arg.column_iter_mut().enumerate() {
            let a = o * self.amplitude[k];
            col.apply(|t| *t = a * t.cos());
        }
        Ok(arg)
    }

    /// `∂(features)/∂θ` at fixed frequencies and phases.
    pub fn derivative(
        &self,
        x: &DMatrix<f64>,
        spec: &KernelSpec,
        params: &Hyperparameters,
        which: HyperIndex,
    ) -> Result<DMatrix<f64>> {
        params.flat_index(which)?;
        let ls = self.check(x, spec, params)?;
        let (n, m) = (x.nrows(), self.len());
        let o = params.outputscale();
        match which {
            HyperIndex::Noise => Ok(DMatrix::zeros(n, m)),
            HyperIndex::OutputScale => Ok(self.features(x, spec, params)? / o),
            HyperIndex::Lengthscale(j) => {
                let arg = self.arguments(x, &ls);
                let dims: Vec<usize> = if spec.ard { vec![j] } else { (0..x.ncols()).collect() };
                let l = if spec.ard { ls[j] } else { ls[0] };
                // ∂/∂l cos(Σ ω x / l + b) = sin(·) Σ ω x / l².
                Ok(DMatrix::from_fn(n, m, |i, k| {
                    let wx: f64 = dims.iter().map(|&t| self.omega[(k, t)] * x[(i, t)]).sum();
                    o * self.amplitude[k] * arg[(i, k)].sin() * wx / (l * l)
                }))
            }
        }
    }
}

/// Random Fourier features: frequencies from the unit-lengthscale spectral
/// density (Gaussian for RBF, Student-t with `2ν` degrees of freedom for
/// Matérn), phases uniform on `[0, 2π)`.
pub fn rff_map<R: Rng>(spec: &KernelSpec, d: usize, features: usize, rng: &mut R) -> Result<FeatureMap> {
    if features == 0 || d == 0 {
        return invalid("RFF needs at least one feature and one input dimension");
    }
    let chi = match spec.family {
        KernelFamily::Rbf => None,
        KernelFamily::Matern(nu) => {
            let dof = 2.0 * nu.value();
            Some((ChiSquared::new(dof).expect("positive degrees of freedom"), dof))
        }
        KernelFamily::RationalQuadratic { .. } => {
            return Err(GpError::Unsupported("RFF is only available for RBF and Matérn kernels".into()))
        }
    };
    let mut omega = DMatrix::zeros(features, d);
    let mut phase = Vec::with_capacity(features);
    for k in 0..features {
        let scale = match &chi {
            None => 1.0,
            Some((c, dof)) => {
                let u: f64 = c.sample(rng);
                (dof / u).sqrt()
            }
        };
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            omega[(k, j)] = z * scale;
        }
        phase.push(rng.random_range(0.0..2.0 * PI));
    }
    let a = (2.0 / features as f64).sqrt();
    Ok(FeatureMap { amplitude: vec![a; features], omega, phase })
}

/// Nodes and normalized weights (summing to one) of the `q`-point
/// Gauss–Hermite rule for the weight `e^{−t²}`, by Golub–Welsch.
pub fn gauss_hermite(q: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if q == 0 {
        return invalid("Gauss-Hermite rule needs at least one node");
    }
    let off = (1..q).map(|k| (k as f64 / 2.0).sqrt()).collect();
    let t = SymTridiagonal::new(vec![0.0; q], off)?;
    let e = t.eigen()?;
    Ok((e.values, e.first_components_sq))
}

/// Quadrature Fourier features for the 1-d RBF kernel: a `features`-node
/// Gauss–Hermite rule, with each ± node pair folded into a cosine and a sine
/// feature. Deterministic.
pub fn qff_map(spec: &KernelSpec, d: usize, features: usize) -> Result<FeatureMap> {
    if d != 1 {
        return Err(GpError::Unsupported(format!("QFF is implemented for d = 1 only, got d = {d}")));
    }
    if spec.family != KernelFamily::Rbf {
        return Err(GpError::Unsupported("QFF is implemented for the RBF kernel only".into()));
    }
    let (nodes, weights) = gauss_hermite(features)?;
    let q = nodes.len();
    let mut amplitude = Vec::with_capacity(q);
    let mut freq = Vec::with_capacity(q);
    let mut phase = Vec::with_capacity(q);
    if q % 2 == 1 {
        amplitude.push(weights[q / 2].sqrt());
        freq.push(0.0);
        phase.push(0.0);
    }
    for i in (q + 1) / 2..q {
        let w = weights[i] + weights[q - 1 - i];
        let a = w.sqrt();
        let f = std::f64::consts::SQRT_2 * nodes[i];
        amplitude.extend([a, a]);
        freq.extend([f, f]);
        phase.extend([0.0, -FRAC_PI_2]);
    }
    Ok(FeatureMap { amplitude, omega: DMatrix::from_vec(q, 1, freq), phase })
}
