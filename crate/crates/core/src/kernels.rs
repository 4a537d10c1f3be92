//! Stationary covariance functions and matrix-free kernel operators.
//!
//! All families are written as `k(x, y) = o² φ(s)` with `s` the squared
//! distance after dividing each coordinate by its lengthscale. The matrix the
//! solvers see is `K̂ = K + σ² I`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::linalg::{dot, symmetrize_upper, ColumnAccess, DerivOperator, LinearOperator};
use crate::parallel;

/// Half-integer Matérn smoothness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaternNu {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl MaternNu {
    pub fn value(self) -> f64 {
        match self {
            MaternNu::Half => 0.5,
            MaternNu::ThreeHalves => 1.5,
            MaternNu::FiveHalves => 2.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelFamily {
    Rbf,
    Matern(MaternNu),
    RationalQuadratic { alpha: f64 },
}

impl KernelFamily {
    /// Rational quadratic with the default shape `α = 1`.
    pub fn rational_quadratic() -> Self {
        KernelFamily::RationalQuadratic { alpha: 1.0 }
    }

    /// Profile `φ(s)` and its derivative `dφ/ds` at scaled squared distance `s`.
    ///
    /// For Matérn(1/2) the derivative is singular at `s = 0`; callers only use
    /// it multiplied by a squared coordinate difference, which vanishes there,
    /// so `0` is returned in that case.
    #[inline]
    pub fn profile(self, s: f64) -> (f64, f64) {
        match self {
            KernelFamily::Rbf => {
                let e = (-0.5 * s).exp();
                (e, -0.5 * e)
            }
            KernelFamily::Matern(MaternNu::Half) => {
                let r = s.sqrt();
                let e = (-r).exp();
                let d = if r > 0.0 { -e / (2.0 * r) } else { 0.0 };
                (e, d)
            }
            KernelFamily::Matern(MaternNu::ThreeHalves) => {
                let t = (3.0 * s).sqrt();
                let e = (-t).exp();
                ((1.0 + t) * e, -1.5 * e)
            }
            KernelFamily::Matern(MaternNu::FiveHalves) => {
                let t = (5.0 * s).sqrt();
                let e = (-t).exp();
                ((1.0 + t + 5.0 * s / 3.0) * e, -(5.0 / 6.0) * (1.0 + t) * e)
            }
            KernelFamily::RationalQuadratic { alpha } => {
                let base = 1.0 + s / (2.0 * alpha);
                (base.powf(-alpha), -0.5 * base.powf(-alpha - 1.0))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// One lengthscale per input dimension when set, a single shared one otherwise.
    pub ard: bool,
}

impl KernelSpec {
    pub fn new(family: KernelFamily) -> Self {
        KernelSpec { family, ard: true }
    }

    pub fn rbf() -> Self {
        Self::new(KernelFamily::Rbf)
    }

    pub fn matern(nu: MaternNu) -> Self {
        Self::new(KernelFamily::Matern(nu))
    }

    /// Number of lengthscale parameters for inputs of dimension `d`.
    pub fn num_lengthscales(&self, d: usize) -> usize {
        if self.ard {
            d
        } else {
            1
        }
    }

    fn validate(&self) -> Result<()> {
        if let KernelFamily::RationalQuadratic { alpha } = self.family {
            if !(alpha.is_finite() && alpha > 0.0) {
                return invalid(format!("rational quadratic alpha must be positive, got {alpha}"));
            }
        }
        Ok(())
    }
}

/// Kernel hyperparameters, stored in log-space.
///
/// `log_outputscale` is `log o` (so `k(x, x) = o²`), `log_noise` is `log σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub log_outputscale: f64,
    pub log_lengthscales: Vec<f64>,
    pub log_noise: f64,
}

/// Index of a single hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperIndex {
    OutputScale,
    Lengthscale(usize),
    Noise,
}

impl Hyperparameters {
    /// Build from raw (positive) values.
    pub fn from_raw(outputscale: f64, lengthscales: &[f64], noise: f64) -> Result<Self> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(outputscale) || !ok(noise) || !lengthscales.iter().all(|&l| ok(l)) || lengthscales.is_empty() {
            return invalid("hyperparameters must be positive and finite");
        }
        Ok(Hyperparameters {
            log_outputscale: outputscale.ln(),
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_noise: noise.ln(),
        })
    }

    /// Inverse of [`Hyperparameters::to_log_vector`].
    pub fn from_log_vector(theta: &[f64]) -> Result<Self> {
        if theta.len() < 3 {
            return invalid("need at least outputscale, one lengthscale and noise");
        }
        let h = Hyperparameters {
            log_outputscale: theta[0],
            log_lengthscales: theta[1..theta.len() - 1].to_vec(),
            log_noise: theta[theta.len() - 1],
        };
        h.validate()?;
        Ok(h)
    }

    /// `[log o, log l_1, …, log l_d, log σ²]`.
    pub fn to_log_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.push(self.log_outputscale);
        v.extend_from_slice(&self.log_lengthscales);
        v.push(self.log_noise);
        v
    }

    /// Number of hyperparameters (`1 + #lengthscales + 1`).
    pub fn len(&self) -> usize {
        self.log_lengthscales.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn outputscale(&self) -> f64 {
        self.log_outputscale.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    pub fn noise(&self) -> f64 {
        self.log_noise.exp()
    }

    /// Flat position of `which` in [`Hyperparameters::to_log_vector`].
    pub fn flat_index(&self, which: HyperIndex) -> Result<usize> {
        match which {
            HyperIndex::OutputScale => Ok(0),
            HyperIndex::Lengthscale(j) if j < self.log_lengthscales.len() => Ok(1 + j),
            HyperIndex::Lengthscale(j) => invalid(format!(
                "lengthscale index {j} out of range ({} lengthscales)",
                self.log_lengthscales.len()
            )),
            HyperIndex::Noise => Ok(self.len() - 1),
        }
    }

    /// All indices in flat order.
    pub fn indices(&self) -> Vec<HyperIndex> {
        let mut v = vec![HyperIndex::OutputScale];
        v.extend((0..self.log_lengthscales.len()).map(HyperIndex::Lengthscale));
        v.push(HyperIndex::Noise);
        v
    }

    /// Raw value of one hyperparameter (the factor for the log-space chain rule).
    pub fn raw_value(&self, which: HyperIndex) -> Result<f64> {
        let i = self.flat_index(which)?;
        Ok(self.to_log_vector()[i].exp())
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.to_log_vector();
        if all.iter().any(|t| !t.exp().is_finite() || t.exp() <= 0.0) {
            return invalid(format!("hyperparameters overflow or underflow: {all:?}"));
        }
        Ok(())
    }
}

/// How kernel entries are accessed by the matrix-vector products.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorMode {
    /// Assemble `K` once and keep it.
    Dense,
    /// Recompute entries on every product, `block_rows` rows per work item.
    MatrixFree { block_rows: usize },
}

impl OperatorMode {
    pub fn matrix_free() -> Self {
        OperatorMode::MatrixFree { block_rows: 1024 }
    }

    /// Dense below `dense_limit` points, matrix-free above.
    pub fn auto(n: usize, dense_limit: usize) -> Self {
        if n <= dense_limit {
            OperatorMode::Dense
        } else {
            Self::matrix_free()
        }
    }
}

/// Evaluate `k(x, y)` for a single pair.
pub fn kernel_value(spec: &KernelSpec, params: &Hyperparameters, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return invalid(format!("dimension mismatch: {} vs {}", x.len(), y.len()));
    }
    spec.validate()?;
    params.validate()?;
    let nl = spec.num_lengthscales(x.len());
    if params.log_lengthscales.len() != nl {
        return invalid(format!("expected {nl} lengthscales, got {}", params.log_lengthscales.len()));
    }
    let ls = params.lengthscales();
    let s: f64 = x
        .iter()
        .zip(y)
        .enumerate()
        .map(|(j, (a, b))| {
            let l = if spec.ard { ls[j] } else { ls[0] };
            let d = (a - b) / l;
            d * d
        })
        .sum();
    let o = params.outputscale();
    Ok(o * o * spec.family.profile(s).0)
}

/// `K̂ = K(X, X) + σ² I` behind matrix-vector products.
///
/// Immutable after construction; every product is a pure function of its
/// input, so concurrent use is fine.
#[derive(Debug)]
pub struct KernelOperator {
    spec: KernelSpec,
    params: Hyperparameters,
    data: DMatrix<f64>,
    /// Row-major copy of `X / l`.
    scaled: Vec<f64>,
    sq_norms: Vec<f64>,
    lengthscales: Vec<f64>,
    mode: OperatorMode,
    /// Noise-free `K`, dense mode only.
    dense: Option<DMatrix<f64>>,
    deriv_cache: Vec<OnceLock<DMatrix<f64>>>,
}

impl KernelOperator {
    /// `data` is `n × d`, one point per row.
    pub fn new(spec: KernelSpec, data: DMatrix<f64>, params: Hyperparameters, mode: OperatorMode) -> Result<Self> {
        spec.validate()?;
        params.validate()?;
        let (n, d) = data.shape();
        if n == 0 || d == 0 {
            return invalid("data must have at least one row and one column");
        }
        if !data.iter().all(|x| x.is_finite()) {
            return invalid("data contains non-finite values");
        }
        let nl = spec.num_lengthscales(d);
        if params.log_lengthscales.len() != nl {
            return invalid(format!("expected {nl} lengthscales for d = {d}, got {}", params.log_lengthscales.len()));
        }
        if let OperatorMode::MatrixFree { block_rows } = mode {
            if block_rows == 0 {
                return invalid("block_rows must be positive");
            }
        }
        let ls = params.lengthscales();
        let mut scaled = vec![0.0; n * d];
        let mut sq_norms = vec![0.0; n];
        for i in 0..n {
            for j in 0..d {
                let l = if spec.ard { ls[j] } else { ls[0] };
                scaled[i * d + j] = data[(i, j)] / l;
            }
            sq_norms[i] = scaled[i * d..(i + 1) * d].iter().map(|x| x * x).sum();
        }
        let mut op = KernelOperator {
            spec,
            deriv_cache: (0..params.len()).map(|_| OnceLock::new()).collect(),
            params,
            data,
            scaled,
            sq_norms,
            lengthscales: ls,
            mode,
            dense: None,
        };
        if mode == OperatorMode::Dense {
            op.dense = Some(op.assemble(|i, j| op.entry(i, j)));
        }
        Ok(op)
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn params(&self) -> &Hyperparameters {
        &self.params
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn mode(&self) -> OperatorMode {
        self.mode
    }

    pub fn noise(&self) -> f64 {
        self.params.noise()
    }

    /// Scaled squared distance via `‖x‖² + ‖y‖² − 2xᵀy`, clamped at zero.
    #[inline]
    fn scaled_sq_dist(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let d = self.data.ncols();
        let cross = dot(&self.scaled[i * d..(i + 1) * d], &self.scaled[j * d..(j + 1) * d]);
        (self.sq_norms[i] + self.sq_norms[j] - 2.0 * cross).max(0.0)
    }

    /// Noise-free kernel entry `K_ij`.
    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let o = self.params.outputscale();
        o * o * self.spec.family.profile(self.scaled_sq_dist(i, j)).0
    }

    /// Entry of `∂K̂/∂θ` for the raw (not log) hyperparameter `which`.
    #[inline]
    fn deriv_entry(&self, which: HyperIndex, i: usize, j: usize) -> f64 {
        let o = self.params.outputscale();
        match which {
            HyperIndex::Noise => {
                if i == j {
                    1.0
                } else {
                    0.0
                }
            }
            HyperIndex::OutputScale => 2.0 * o * self.spec.family.profile(self.scaled_sq_dist(i, j)).0,
            HyperIndex::Lengthscale(m) => {
                if i == j {
                    return 0.0;
                }
                let s = self.scaled_sq_dist(i, j);
                let dphi = self.spec.family.profile(s).1;
                // ∂s/∂l_m = −2 (x_m − y_m)² / l_m³, or −2 s / l without ARD.
                let ds = if self.spec.ard {
                    let diff = self.data[(i, m)] - self.data[(j, m)];
                    let l = self.lengthscales[m];
                    -2.0 * diff * diff / (l * l * l)
                } else {
                    -2.0 * s / self.lengthscales[0]
                };
                o * o * dphi * ds
            }
        }
    }

    fn check_index(&self, which: HyperIndex) -> Result<()> {
        self.params.flat_index(which).map(|_| ())
    }

    fn assemble(&self, f: impl Fn(usize, usize) -> f64 + Sync) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        // Column j holds rows 0..=j of the upper triangle.
        let cols = parallel::map_indexed(n, |j| (0..=j).map(|i| f(i, j)).collect::<Vec<_>>());
        for (j, col) in cols.into_iter().enumerate() {
            for (i, v) in col.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        symmetrize_upper(&mut m);
        m
    }

    /// Dense noise-free `K` (copied in dense mode, assembled otherwise).
    pub fn dense_kernel(&self) -> DMatrix<f64> {
        match &self.dense {
            Some(k) => k.clone(),
            None => self.assemble(|i, j| self.entry(i, j)),
        }
    }

    /// Dense `K̂ = K + σ² I`.
    pub fn dense_k_hat(&self) -> DMatrix<f64> {
        let mut k = self.dense_kernel();
        let s2 = self.noise();
        for i in 0..self.n() {
            k[(i, i)] += s2;
        }
        k
    }

    /// Dense `∂K̂/∂θ` for the raw hyperparameter `which`.
    pub fn dense_deriv(&self, which: HyperIndex) -> Result<DMatrix<f64>> {
        self.check_index(which)?;
        Ok(match which {
            HyperIndex::Noise => DMatrix::identity(self.n(), self.n()),
            _ => self.assemble(|i, j| self.deriv_entry(which, i, j)),
        })
    }

    /// Column `j` of the noise-free `K`.
    pub fn column(&self, j: usize) -> DVector<f64> {
        match &self.dense {
            Some(k) => k.column(j).into_owned(),
            None => DVector::from_fn(self.n(), |i, _| self.entry(i, j)),
        }
    }

    /// Column `j` of `∂K̂/∂θ` (noise-free part for the kernel hyperparameters).
    pub fn deriv_column(&self, which: HyperIndex, j: usize) -> Result<DVector<f64>> {
        self.check_index(which)?;
        Ok(DVector::from_fn(self.n(), |i, _| self.deriv_entry(which, i, j)))
    }

    /// Diagonal of the noise-free `K` (constant `o²` for stationary kernels).
    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_fn(self.n(), |i, _| self.entry(i, i))
    }

    /// Diagonal of `∂K̂/∂θ`.
    pub fn deriv_diagonal(&self, which: HyperIndex) -> Result<DVector<f64>> {
        self.check_index(which)?;
        Ok(DVector::from_fn(self.n(), |i, _| self.deriv_entry(which, i, i)))
    }

    fn rowwise(&self, v: &DVector<f64>, f: impl Fn(usize, usize) -> f64 + Sync) -> DVector<f64> {
        let n = self.n();
        let block = match self.mode {
            OperatorMode::MatrixFree { block_rows } => block_rows,
            OperatorMode::Dense => 256,
        };
        let vs = v.as_slice();
        let mut out = vec![0.0; n];
        parallel::fill_chunks(&mut out, block, |start, chunk| {
            let mut row = vec![0.0; n];
            for (k, o) in chunk.iter_mut().enumerate() {
                let i = start + k;
                for (j, r) in row.iter_mut().enumerate() {
                    *r = f(i, j);
                }
                *o = dot(&row, vs);
            }
        });
        DVector::from_vec(out)
    }

    fn check_vector(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.n() {
            return invalid(format!("vector length {} does not match n = {}", v.len(), self.n()));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return invalid("vector contains non-finite entries");
        }
        Ok(())
    }

    /// `K v` without the noise term.
    pub fn kernel_only_matvec(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.dense {
            Some(k) => crate::linalg::symmetric_matvec(k, v),
            None => self.rowwise(v, |i, j| self.entry(i, j)),
        }
    }

    /// `(K + σ² I) v`.
    pub fn matvec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_vector(v)?;
        Ok(self.apply_unchecked(v))
    }

    fn apply_unchecked(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = self.kernel_only_matvec(v);
        out.axpy(self.noise(), v, 1.0);
        out
    }

    /// `(∂K̂/∂θ) v` for the raw hyperparameter `which`; the noise case returns `v`.
    pub fn deriv_matvec(&self, which: HyperIndex, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_index(which)?;
        self.check_vector(v)?;
        Ok(self.deriv_apply_unchecked(which, v))
    }

    fn deriv_apply_unchecked(&self, which: HyperIndex, v: &DVector<f64>) -> DVector<f64> {
        match which {
            HyperIndex::Noise => v.clone(),
            HyperIndex::OutputScale => self.kernel_only_matvec(v) * (2.0 / self.params.outputscale()),
            HyperIndex::Lengthscale(_) => match self.mode {
                OperatorMode::Dense => {
                    let slot = self.params.flat_index(which).expect("checked index");
                    let m = self.deriv_cache[slot].get_or_init(|| self.assemble(|i, j| self.deriv_entry(which, i, j)));
                    crate::linalg::symmetric_matvec(m, v)
                }
                OperatorMode::MatrixFree { .. } => self.rowwise(v, |i, j| self.deriv_entry(which, i, j)),
            },
        }
    }

    /// `∂K̂/∂θ` as a [`LinearOperator`].
    pub fn deriv_operator(&self, which: HyperIndex) -> Result<KernelDerivOperator<'_>> {
        self.check_index(which)?;
        Ok(KernelDerivOperator { op: self, which })
    }

    /// Same data and kernel at different hyperparameters.
    pub fn with_params(&self, params: Hyperparameters) -> Result<Self> {
        KernelOperator::new(self.spec, self.data.clone(), params, self.mode)
    }
}

impl LinearOperator for KernelOperator {
    fn dim(&self) -> usize {
        self.n()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_unchecked(v)
    }
}

/// `∂K̂/∂θ` for one hyperparameter, borrowed from a [`KernelOperator`].
#[derive(Debug, Clone, Copy)]
pub struct KernelDerivOperator<'a> {
    op: &'a KernelOperator,
    which: HyperIndex,
}

impl KernelDerivOperator<'_> {
    pub fn which(&self) -> HyperIndex {
        self.which
    }
}

impl LinearOperator for KernelDerivOperator<'_> {
    fn dim(&self) -> usize {
        self.op.n()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.op.deriv_apply_unchecked(self.which, v)
    }
}

impl DerivOperator for KernelDerivOperator<'_> {
    fn diag_vec(&self) -> DVector<f64> {
        self.op.deriv_diagonal(self.which).expect("checked index")
    }
}

/// Noise-free `K` through the column interface.
impl ColumnAccess for KernelOperator {
    fn size(&self) -> usize {
        self.n()
    }
    fn diag_vec(&self) -> DVector<f64> {
        self.diagonal()
    }
    fn column_vec(&self, j: usize) -> DVector<f64> {
        self.column(j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::GpError;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_params(d: usize) -> Hyperparameters {
        Hyperparameters::from_raw(1.0, &vec![1.0; d], 1e-2).unwrap()
    }

    fn random_data(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn rbf_at_zero_distance_is_outputscale_squared() {
        let p = unit_params(1);
        assert_eq!(kernel_value(&KernelSpec::rbf(), &p, &[0.3], &[0.3]).unwrap(), 1.0);
        let p2 = Hyperparameters::from_raw(2.0, &[0.7], 1e-2).unwrap();
        let k = kernel_value(&KernelSpec::rbf(), &p2, &[0.3], &[0.3]).unwrap();
        assert!((k - 4.0).abs() < 1e-14);
    }

    #[test]
    fn matern_half_closed_form() {
        let p = unit_params(1);
        let k = kernel_value(&KernelSpec::matern(MaternNu::Half), &p, &[0.0], &[1.0]).unwrap();
        assert!((k - (-1.0f64).exp()).abs() < 1e-15);
        assert!((k - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn rbf_half_height_distance() {
        let p = unit_params(1);
        let r = (2.0 * 2f64.ln()).sqrt();
        let k = kernel_value(&KernelSpec::rbf(), &p, &[0.0], &[r]).unwrap();
        assert!((k - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = unit_params(2);
        assert!(kernel_value(&KernelSpec::rbf(), &p, &[0.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn scalar_operator() {
        let p = Hyperparameters::from_raw(1.5, &[1.0], 0.3).unwrap();
        let op = KernelOperator::new(KernelSpec::rbf(), DMatrix::from_element(1, 1, 0.2), p, OperatorMode::Dense).unwrap();
        let out = op.matvec(&DVector::from_element(1, 1.0)).unwrap();
        assert!((out[0] - (2.25 + 0.3)).abs() < 1e-15);
        let zero = op.matvec(&DVector::zeros(1)).unwrap();
        assert_eq!(zero[0], 0.0);
    }

    #[test]
    fn non_finite_vector_is_rejected() {
        let op = KernelOperator::new(KernelSpec::rbf(), random_data(4, 1, 0), unit_params(1), OperatorMode::Dense).unwrap();
        let mut v = DVector::zeros(4);
        v[2] = f64::NAN;
        assert!(matches!(op.matvec(&v), Err(GpError::InvalidInput(_))));
        assert!(op.deriv_matvec(HyperIndex::Lengthscale(3), &DVector::zeros(4)).is_err());
    }

    #[test]
    fn matvec_matches_dense_assembly_in_both_modes() {
        let x = random_data(64, 2, 1);
        let p = Hyperparameters::from_raw(1.3, &[0.8, 1.7], 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = DVector::from_fn(64, |_, _| rng.random_range(-1.0..1.0));
        // Oracle: pairwise kernel_value, independent of the operator's distance path.
        let mut dense = DMatrix::zeros(64, 64);
        for i in 0..64 {
            for j in 0..64 {
                let xi: Vec<f64> = x.row(i).iter().copied().collect();
                let xj: Vec<f64> = x.row(j).iter().copied().collect();
                dense[(i, j)] = kernel_value(&KernelSpec::rbf(), &p, &xi, &xj).unwrap();
            }
            dense[(i, i)] += 0.05;
        }
        let want = &dense * &v;
        for mode in [OperatorMode::Dense, OperatorMode::MatrixFree { block_rows: 7 }] {
            let op = KernelOperator::new(KernelSpec::rbf(), x.clone(), p.clone(), mode).unwrap();
            let got = op.matvec(&v).unwrap();
            assert!((&got - &want).norm() <= 1e-12 * want.norm(), "{mode:?}");
        }
    }

    fn fd_check(spec: KernelSpec, which: HyperIndex) {
        let n = 32;
        let x = random_data(n, 2, 5);
        let p = Hyperparameters::from_raw(1.2, &[0.9, 1.4], 0.1).unwrap();
        let op = KernelOperator::new(spec, x.clone(), p.clone(), OperatorMode::Dense).unwrap();
        let h = 1e-6;
        let idx = p.flat_index(which).unwrap();
        let shifted = |sign: f64| {
            let mut raw: Vec<f64> = p.to_log_vector().iter().map(|t| t.exp()).collect();
            raw[idx] += sign * h;
            let q = Hyperparameters::from_raw(raw[0], &raw[1..3], raw[3]).unwrap();
            KernelOperator::new(spec, x.clone(), q, OperatorMode::Dense).unwrap().dense_k_hat()
        };
        let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let want = &fd * &v;
        for mode in [OperatorMode::Dense, OperatorMode::MatrixFree { block_rows: 5 }] {
            let op2 = KernelOperator::new(spec, x.clone(), p.clone(), mode).unwrap();
            let got = op2.deriv_matvec(which, &v).unwrap();
            let rel = (&got - &want).norm() / want.norm().max(1e-300);
            assert!(rel < 1e-5, "{spec:?} {which:?} {mode:?}: rel {rel}");
        }
        let dense = op.dense_deriv(which).unwrap();
        assert!((&dense - &fd).norm() <= 1e-5 * fd.norm().max(1e-12));
    }

    #[test]
    fn derivative_matvecs_match_finite_differences() {
        let families = [
            KernelFamily::Rbf,
            KernelFamily::Matern(MaternNu::Half),
            KernelFamily::Matern(MaternNu::ThreeHalves),
            KernelFamily::Matern(MaternNu::FiveHalves),
            KernelFamily::rational_quadratic(),
        ];
        for fam in families {
            for which in [HyperIndex::OutputScale, HyperIndex::Lengthscale(0), HyperIndex::Lengthscale(1), HyperIndex::Noise] {
                fd_check(KernelSpec::new(fam), which);
            }
        }
    }

    #[test]
    fn shared_lengthscale_derivative() {
        let spec = KernelSpec { family: KernelFamily::Matern(MaternNu::FiveHalves), ard: false };
        let x = random_data(16, 3, 11);
        let p = Hyperparameters::from_raw(0.8, &[1.1], 0.2).unwrap();
        let op = KernelOperator::new(spec, x.clone(), p, OperatorMode::Dense).unwrap();
        let h = 1e-6;
        let at = |l: f64| {
            let q = Hyperparameters::from_raw(0.8, &[l], 0.2).unwrap();
            KernelOperator::new(spec, x.clone(), q, OperatorMode::Dense).unwrap().dense_k_hat()
        };
        let fd = (at(1.1 + h) - at(1.1 - h)) / (2.0 * h);
        let d = op.dense_deriv(HyperIndex::Lengthscale(0)).unwrap();
        assert!((d - &fd).norm() < 1e-5 * fd.norm());
    }

    #[test]
    fn outputscale_derivative_is_two_over_o_times_k() {
        let x = random_data(32, 1, 3);
        let p = Hyperparameters::from_raw(1.7, &[0.6], 0.01).unwrap();
        let op = KernelOperator::new(KernelSpec::rbf(), x, p, OperatorMode::Dense).unwrap();
        let v = DVector::from_fn(32, |i, _| (i as f64).cos());
        let got = op.deriv_matvec(HyperIndex::OutputScale, &v).unwrap();
        let want = op.dense_kernel() * &v * (2.0 / 1.7);
        assert!((got - want).norm() < 1e-12);
        let noise = op.deriv_matvec(HyperIndex::Noise, &v).unwrap();
        assert_eq!(noise, v);
    }

    #[test]
    fn kernel_matrices_are_psd_and_bounded_by_diagonal() {
        let families = [
            KernelFamily::Rbf,
            KernelFamily::Matern(MaternNu::Half),
            KernelFamily::Matern(MaternNu::ThreeHalves),
            KernelFamily::Matern(MaternNu::FiveHalves),
            KernelFamily::rational_quadratic(),
        ];
        for (s, fam) in families.into_iter().enumerate() {
            let x = random_data(128, 2, 100 + s as u64);
            let p = Hyperparameters::from_raw(1.4, &[0.5, 2.0], 0.01).unwrap();
            let op = KernelOperator::new(KernelSpec::new(fam), x, p, OperatorMode::Dense).unwrap();
            let k = op.dense_kernel();
            let eig = k.clone().symmetric_eigenvalues();
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min > -1e-10, "{fam:?}: min eigenvalue {min}");
            let o2 = 1.4f64 * 1.4;
            assert!(k.iter().all(|&v| v <= o2 + 1e-12));
            for i in 0..128 {
                assert!((k[(i, i)] - o2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_vector_round_trip() {
        let p = Hyperparameters::from_raw(2.0, &[0.5, 3.0], 1e-3).unwrap();
        let q = Hyperparameters::from_log_vector(&p.to_log_vector()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.flat_index(HyperIndex::Noise).unwrap(), 3);
        assert!(Hyperparameters::from_raw(-1.0, &[1.0], 1.0).is_err());
    }
}
