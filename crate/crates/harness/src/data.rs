//! Datasets: synthetic GP draws and CSV files, plus train/validation/test
//! splitting and standardization.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use varred_gp::kernels::{Hyperparameters, KernelOperator, KernelSpec, OperatorMode};
use varred_gp::likelihood::DENSE_LIMIT;
use varred_gp::optimizer::GpData;
use varred_gp::preconditioners::{build_preconditioner, PrecondSpec};

use crate::error::{input, HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// Generating hyperparameters for synthetic data.
    pub truth: Option<Hyperparameters>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn as_gp_data(&self) -> Result<GpData> {
        Ok(GpData::new(self.x.clone(), self.y.clone())?)
    }
}

/// Draw `n` inputs from `N(0, I_d)` and targets from the GP prior with
/// hyperparameters `truth`, noise included.
///
/// Up to the dense limit the draw is exact (Cholesky of `K̂`). Beyond it the
/// latent function comes from a random-Fourier-feature approximation of the
/// kernel with 2048 features.
pub fn gen_synthetic(n: usize, d: usize, seed: u64, spec: &KernelSpec, truth: &Hyperparameters) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return input("synthetic dataset needs n >= 1 and d >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = if n <= DENSE_LIMIT {
        let op = KernelOperator::new(*spec, x.clone(), truth.clone(), OperatorMode::Dense)?;
        let chol = op
            .dense_k_hat()
            .cholesky()
            .ok_or_else(|| HarnessError::Numerical("prior covariance is not positive definite".into()))?;
        chol.l() * z
    } else {
        let op = KernelOperator::new(*spec, x.clone(), truth.clone(), OperatorMode::matrix_free())?;
        let rff = build_preconditioner(&op, &PrecondSpec::Rff, 2048, seed ^ 0x5EED)?;
        let w = DVector::from_fn(rff.rank(), |_, _| rng.sample::<f64, _>(StandardNormal));
        rff.factor() * w + z * truth.noise().sqrt()
    };
    Ok(Dataset {
        x,
        y,
        feature_names: (0..d).map(|j| format!("x{j}")).collect(),
        target_name: "y".into(),
        truth: Some(truth.clone()),
    })
}

/// Read a numeric CSV with a header row. Lines starting with `#` are skipped.
/// The target is the named column, or the last one.
pub fn read_csv(path: &Path, target: Option<&str>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_owned).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return input(format!("{}: missing header row", path.display()));
    }
    if header.iter().all(|h| h.parse::<f64>().is_ok()) {
        return input(format!("{}: first row is numeric; a header row is required", path.display()));
    }
    if header.len() < 2 {
        return input(format!("{}: need at least one feature and one target column", path.display()));
    }
    let t = match target {
        Some(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::Input(format!("{}: no column named '{name}'", path.display())))?,
        None => header.len() - 1,
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row = r + 1;
        if rec.len() != header.len() {
            return input(format!("{}: data row {row} has {} fields, expected {}", path.display(), rec.len(), header.len()));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                HarnessError::Input(format!("{}: data row {row}, column '{}': '{field}' is not a number", path.display(), header[c]))
            })?;
            if !v.is_finite() {
                return input(format!("{}: data row {row}, column '{}': value is not finite", path.display(), header[c]));
            }
            if c == t {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    if ys.is_empty() {
        return input(format!("{}: no data rows", path.display()));
    }
    let d = header.len() - 1;
    let n = ys.len();
    Ok(Dataset {
        x: DMatrix::from_row_slice(n, d, &xs),
        y: DVector::from_vec(ys),
        feature_names: header.iter().enumerate().filter(|(c, _)| *c != t).map(|(_, h)| h.clone()).collect(),
        target_name: header[t].clone(),
        truth: None,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> HarnessError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => HarnessError::io(path, source),
        other => HarnessError::Input(format!("{}: {other:?}", path.display())),
    }
}

/// Per-column affine maps fitted on the training block.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Standardization {
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, names: &[String], target: &str) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return input("standardization needs at least two training rows");
        }
        let stats = |v: &[f64], name: &str| -> Result<(f64, f64)> {
            let m = v.iter().sum::<f64>() / n as f64;
            let s = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            if !(s > 0.0) {
                return input(format!("column '{name}' is constant on the training split"));
            }
            Ok((m, s))
        };
        let mut x_mean = Vec::new();
        let mut x_std = Vec::new();
        for j in 0..x.ncols() {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            let (m, s) = stats(&col, &names[j])?;
            x_mean.push(m);
            x_std.push(s);
        }
        let (y_mean, y_std) = stats(y.as_slice(), target)?;
        Ok(Standardization { x_mean, x_std, y_mean, y_std })
    }

    pub fn apply(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let xs = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.x_mean[j]) / self.x_std[j]);
        let ys = y.map(|v| (v - self.y_mean) / self.y_std);
        (xs, ys)
    }

    /// Map standardized targets or predictions back to original units.
    pub fn destandardize_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v * self.y_std + self.y_mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// One block of rows; may be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Block {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn gp_data(&self) -> Option<GpData> {
        GpData::new(self.x.clone(), self.y.clone()).ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Block,
    pub validation: Block,
    pub test: Block,
    /// Split membership of every original row.
    pub assignment: Vec<Split>,
    pub standardization: Option<Standardization>,
}

/// Shuffle rows with `seed` and cut them into `fractions = [train, val, test]`
/// (summing to one). Validation and test sizes are rounded, train takes the
/// rest. Standardization, when requested, uses training statistics only.
pub fn split_dataset(ds: &Dataset, fractions: [f64; 3], seed: u64, standardize: bool) -> Result<Splits> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return input(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1"));
    }
    let n = ds.n();
    let n_test = (fractions[2] * n as f64).round() as usize;
    let n_val = (fractions[1] * n as f64).round() as usize;
    if n_test + n_val >= n {
        return input(format!("split {fractions:?} leaves no training rows out of {n}"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![Split::Train; n];
    for &i in &order[..n_test] {
        assignment[i] = Split::Test;
    }
    for &i in &order[n_test..n_test + n_val] {
        assignment[i] = Split::Validation;
    }
    let block = |which: Split| {
        let rows: Vec<usize> = (0..n).filter(|&i| assignment[i] == which).collect();
        Block { x: ds.x.select_rows(&rows), y: DVector::from_fn(rows.len(), |k, _| ds.y[rows[k]]) }
    };
    let (mut train, mut validation, mut test) = (block(Split::Train), block(Split::Validation), block(Split::Test));
    let standardization = if standardize {
        let s = Standardization::fit(&train.x, &train.y, &ds.feature_names, &ds.target_name)?;
        for b in [&mut train, &mut validation, &mut test] {
            let (x, y) = s.apply(&b.x, &b.y);
            *b = Block { x, y };
        }
        Some(s)
    } else {
        None
    };
    Ok(Splits { train, validation, test, assignment, standardization })
}

/// Read a CSV and split it in one go.
pub fn load_csv(path: &Path, target: Option<&str>, standardize: bool, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Splits)> {
    let ds = read_csv(path, target)?;
    let splits = split_dataset(&ds, fractions, seed, standardize)?;
    Ok((ds, splits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_comments_and_named_target() {
        let f = write("# a comment\na,target,b\n1,10,2\n# mid\n3,20,4\n5,30,7\n");
        let ds = read_csv(f.path(), Some("target")).unwrap();
        assert_eq!(ds.feature_names, ["a", "b"]);
        assert_eq!(ds.y.as_slice(), [10.0, 20.0, 30.0]);
        assert_eq!(ds.x.row(2).iter().copied().collect::<Vec<_>>(), [5.0, 7.0]);
    }

    #[test]
    fn bad_cells_are_located() {
        let f = write("a,b\n1,2\n3,oops\n");
        let msg = read_csv(f.path(), None).unwrap_err().to_string();
        assert!(msg.contains("row 2") && msg.contains("'b'"), "{msg}");
        let f = write("1,2\n3,4\n");
        assert!(read_csv(f.path(), None).unwrap_err().to_string().contains("header"));
        let f = write("a,b\n1,2\n");
        assert!(read_csv(f.path(), Some("c")).is_err());
    }

    #[test]
    fn full_train_split_keeps_every_row_standardized() {
        let f = write("a,b,y\n1,5,1\n2,3,2\n3,9,4\n4,1,8\n");
        let (_, s) = load_csv(f.path(), None, true, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!((s.train.n(), s.validation.n(), s.test.n()), (4, 0, 0));
        for j in 0..2 {
            let c = s.train.x.column(j);
            assert!(c.sum().abs() < 1e-12);
            assert!(((c.norm_squared() / 3.0) - 1.0).abs() < 1e-12);
        }
        let st = s.standardization.unwrap();
        let back = st.destandardize_y(&s.train.y);
        let mut v: Vec<f64> = back.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        for (a, b) in v.iter().zip([1.0, 2.0, 4.0, 8.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_column_is_rejected() {
        let f = write("a,b,y\n1,5,1\n1,3,2\n1,9,4\n");
        let msg = load_csv(f.path(), None, true, [1.0, 0.0, 0.0], 0).unwrap_err().to_string();
        assert!(msg.contains("'a'"), "{msg}");
    }

    #[test]
    fn splits_are_deterministic_and_disjoint() {
        let ds = gen_synthetic(50, 2, 1, &KernelSpec::rbf(), &Hyperparameters::from_raw(1.0, &[0.5, 0.5], 0.01).unwrap()).unwrap();
        let a = split_dataset(&ds, [0.64, 0.16, 0.2], 7, false).unwrap();
        let b = split_dataset(&ds, [0.64, 0.16, 0.2], 7, false).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.n(), a.validation.n(), a.test.n()), (32, 8, 10));
        assert!(split_dataset(&ds, [0.5, 0.2, 0.2], 7, false).is_err());
    }

    #[test]
    fn synthetic_draw_has_prior_scale() {
        let truth = Hyperparameters::from_raw(2.0, &[0.3], 0.01).unwrap();
        let ds = gen_synthetic(400, 1, 5, &KernelSpec::rbf(), &truth).unwrap();
        let var = ds.y.norm_squared() / 400.0;
        assert!(var > 1.0 && var < 10.0, "{var}");
    }
}
