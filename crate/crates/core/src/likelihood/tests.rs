use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::kernels::MaternNu;
use crate::oracle::DensePreconditioner;
use crate::preconditioners::{build_preconditioner, PrecondKind, PrecondSpec};

fn normal_data(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = DVector::from_fn(n, |i, _| (2.0 * x[(i, 0)]).sin() + 0.1 * rng.sample::<f64, _>(StandardNormal));
    (x, y)
}

fn rbf_params(d: usize, l: f64, noise: f64) -> Hyperparameters {
    Hyperparameters::from_raw(1.0, &vec![l; d], noise).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn pivchol(op: &KernelOperator, rank: usize) -> DiagPlusLowRank {
    build_preconditioner(op, &PrecondSpec::default_for(PrecondKind::PivotedCholesky), rank, 0).unwrap()
}

// ---------- n = 1 closed forms ----------

fn scalar_case() -> (DVector<f64>, KernelOperator, f64, f64, f64) {
    let (o, s2, y1) = (1.3, 0.2, 0.7);
    let x = DMatrix::from_element(1, 1, 0.4);
    let p = Hyperparameters::from_raw(o, &[0.9], s2).unwrap();
    let op = KernelOperator::new(KernelSpec::rbf(), x, p, OperatorMode::Dense).unwrap();
    (DVector::from_element(1, y1), op, o, s2, y1)
}

#[test]
fn scalar_value_closed_form() {
    let (y, op, o, s2, y1) = scalar_case();
    let s = o * o + s2;
    let want = -0.5 * (y1 * y1 / s + s.ln() + (2.0 * PI).ln());
    let p = DiagPlusLowRank::identity(1, s2).unwrap();
    let batch = make_probes(1, 3, 0).unwrap();
    let f = mll_estimate(&y, &op, &p, &batch, &CgConfig::default()).unwrap();
    assert!((f.value - want).abs() < 1e-14);
    let (v, _) = mll_exact(&y, op.data(), op.spec(), op.params()).unwrap();
    assert!((v - want).abs() < 1e-14);
}

#[test]
fn scalar_gradient_closed_form() {
    let (y, op, o, s2, y1) = scalar_case();
    let s = o * o + s2;
    let ds = 0.5 * (y1 * y1 / (s * s) - 1.0 / s);
    let want = [ds * 2.0 * o * o, 0.0, ds * s2];
    let p = DiagPlusLowRank::identity(1, s2).unwrap();
    let e = mll_evaluate(&y, &op, &p, &MllConfig::default(), 4).unwrap();
    let (_, g) = mll_exact(&y, op.data(), op.spec(), op.params()).unwrap();
    for i in 0..3 {
        assert!((e.gradient[i] - want[i]).abs() < 1e-13, "{:?}", e.gradient);
        assert!((g[i] - want[i]).abs() < 1e-13);
    }
}

// ---------- deterministic collapse ----------

fn collapse(n: usize, spec: KernelSpec, d: usize) {
    let (x, y) = normal_data(n, d, 7);
    let op = KernelOperator::new(spec, x.clone(), rbf_params(d, 0.8, 0.05), OperatorMode::Dense).unwrap();
    let p = DensePreconditioner::new(op.dense_k_hat()).unwrap();
    let cfg = CgConfig { max_iters: n, rel_tol: 1e-13, collect_tridiag: false };
    let batch = make_probes(n, 4, 1).unwrap();
    let f = mll_estimate(&y, &op, &p, &batch, &cfg).unwrap();
    let (want, want_g) = mll_exact(&y, &x, &spec, op.params()).unwrap();
    assert!(rel(f.value, want) <= 1e-8, "{} {want}", f.value);

    let which = op.params().indices();
    let dense: Vec<DMatrix<f64>> = which.iter().map(|&w| op.dense_deriv(w).unwrap()).collect();
    let dk: Vec<&dyn LinearOperator> = dense.iter().map(|m| m as &dyn LinearOperator).collect();
    let dp: Vec<&dyn DerivOperator> = dense.iter().map(|m| m as &dyn DerivOperator).collect();
    let raw: Vec<f64> = which.iter().map(|&w| op.params().raw_value(w).unwrap()).collect();
    let (g, _) = mll_gradient(&f.solve.solution, &op, &dk, &p, &dp, &raw, &batch, &cfg).unwrap();
    for (a, b) in g.iter().zip(&want_g) {
        assert!(rel(*a, *b) <= 1e-8, "{g:?} {want_g:?}");
    }
}

#[test]
fn collapse_with_exact_preconditioner() {
    collapse(64, KernelSpec::rbf(), 2);
    collapse(96, KernelSpec::matern(MaternNu::FiveHalves), 1);
}

// ---------- stochastic accuracy ----------

#[test]
fn value_close_to_dense_with_cholesky_preconditioner() {
    let n = 500;
    let (x, y) = normal_data(n, 1, 3);
    let op = KernelOperator::new(KernelSpec::rbf(), x.clone(), rbf_params(1, 0.5, 1e-2), OperatorMode::Dense).unwrap();
    let p = pivchol(&op, 64);
    let cfg = CgConfig { max_iters: 200, rel_tol: 1e-10, collect_tridiag: false };
    let batch = make_probes(n, 64, 11).unwrap();
    let f = mll_estimate(&y, &op, &p, &batch, &cfg).unwrap();
    let (want, _) = mll_exact(&y, &x, op.spec(), op.params()).unwrap();
    assert!(rel(f.value, want) <= 1e-3, "{} {want}", f.value);
}

fn dense_fd_gradient(y: &DVector<f64>, x: &DMatrix<f64>, spec: &KernelSpec, params: &Hyperparameters, h: f64) -> Vec<f64> {
    let theta = params.to_log_vector();
    (0..theta.len())
        .map(|i| {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fp = mll_exact(y, x, spec, &Hyperparameters::from_log_vector(&tp).unwrap()).unwrap().0;
            let fm = mll_exact(y, x, spec, &Hyperparameters::from_log_vector(&tm).unwrap()).unwrap().0;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

#[test]
fn gradient_close_to_dense_finite_differences() {
    let n = 256;
    let (x, y) = normal_data(n, 1, 5);
    let op = KernelOperator::new(KernelSpec::rbf(), x.clone(), rbf_params(1, 0.6, 1e-2), OperatorMode::Dense).unwrap();
    let p = pivchol(&op, 128);
    let cfg = MllConfig { cg: CgConfig { max_iters: n, rel_tol: 1e-10, collect_tridiag: false }, num_probes: 128, share_probes: true };
    let e = mll_evaluate(&y, &op, &p, &cfg, 21).unwrap();
    let fd = dense_fd_gradient(&y, &x, op.spec(), op.params(), 1e-4);
    for (a, b) in e.gradient.iter().zip(&fd) {
        assert!(rel(*a, *b) <= 5e-2, "{:?} {fd:?}", e.gradient);
    }
}

#[test]
fn gradient_average_is_consistent() {
    let n = 256;
    let (x, y) = normal_data(n, 1, 6);
    let op = KernelOperator::new(KernelSpec::rbf(), x.clone(), rbf_params(1, 0.6, 0.05), OperatorMode::Dense).unwrap();
    let p = pivchol(&op, 8);
    let cfg = MllConfig { cg: CgConfig { max_iters: n, rel_tol: 1e-10, collect_tridiag: false }, num_probes: 4, share_probes: false };
    let (_, exact) = mll_exact(&y, &x, op.spec(), op.params()).unwrap();
    let runs: Vec<Vec<f64>> = (0..20).map(|s| mll_evaluate(&y, &op, &p, &cfg, 100 + 2 * s).unwrap().gradient).collect();
    for i in 0..exact.len() {
        let v: Vec<f64> = runs.iter().map(|g| g[i]).collect();
        let m = v.iter().sum::<f64>() / 20.0;
        let se = (v.iter().map(|g| (g - m).powi(2)).sum::<f64>() / 19.0 / 20.0).sqrt();
        assert!((m - exact[i]).abs() <= 3.0 * se + 1e-9 * exact[i].abs(), "{i}: {m} {} {se}", exact[i]);
    }
}

#[test]
fn value_spread_shrinks_with_rank() {
    let n = 300;
    let (x, y) = normal_data(n, 1, 8);
    let p0 = Hyperparameters::from_raw(1.0, &[0.5], 1e-2).unwrap();
    let op = KernelOperator::new(KernelSpec::matern(MaternNu::ThreeHalves), x, p0, OperatorMode::Dense).unwrap();
    let cfg = CgConfig { max_iters: n, rel_tol: 1e-10, collect_tridiag: false };
    let mut spread = Vec::new();
    for rank in [0usize, 8, 32, 128] {
        let p = pivchol(&op, rank);
        let v: Vec<f64> = (0..25)
            .map(|s| mll_estimate(&y, &op, &p, &make_probes(n, 8, s).unwrap(), &cfg).unwrap().value)
            .collect();
        let m = v.iter().sum::<f64>() / 25.0;
        spread.push((v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 24.0).sqrt());
    }
    for w in spread.windows(2) {
        assert!(w[1] <= w[0], "{spread:?}");
    }
}

#[test]
fn unshared_probes_use_a_second_batch() {
    let (x, y) = normal_data(40, 1, 2);
    let op = KernelOperator::new(KernelSpec::rbf(), x, rbf_params(1, 0.5, 0.1), OperatorMode::Dense).unwrap();
    let p = pivchol(&op, 4);
    let shared = mll_evaluate(&y, &op, &p, &MllConfig::default(), 3).unwrap();
    let split = mll_evaluate(&y, &op, &p, &MllConfig { share_probes: false, ..MllConfig::default() }, 3).unwrap();
    assert_eq!(shared.value, split.value);
    assert_ne!(shared.gradient, split.gradient);
    assert_eq!(shared.backward_gammas.len(), 3);
    assert_eq!(shared.backward_gammas[0].len(), 16);
    assert_eq!(shared, mll_evaluate(&y, &op, &p, &MllConfig::default(), 3).unwrap());
}

// ---------- dense reference ----------

#[test]
fn exact_gradient_matches_its_finite_differences() {
    let (x, y) = normal_data(60, 2, 9);
    let spec = KernelSpec::matern(MaternNu::FiveHalves);
    let params = Hyperparameters::from_raw(1.2, &[0.7, 1.4], 0.05).unwrap();
    let (_, g) = mll_exact(&y, &x, &spec, &params).unwrap();
    let fd = dense_fd_gradient(&y, &x, &spec, &params, 1e-5);
    for (a, b) in g.iter().zip(&fd) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{g:?} {fd:?}");
    }
}

#[test]
fn exact_value_is_permutation_invariant() {
    let (x, y) = normal_data(50, 2, 10);
    let spec = KernelSpec::rbf();
    let params = rbf_params(2, 0.9, 0.05);
    let perm: Vec<usize> = (0..50).map(|i| (i * 17 + 3) % 50).collect();
    let xp = x.select_rows(perm.iter());
    let yp = DVector::from_fn(50, |i, _| y[perm[i]]);
    let a = mll_exact(&y, &x, &spec, &params).unwrap().0;
    let b = mll_exact(&yp, &xp, &spec, &params).unwrap().0;
    assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
}

#[test]
fn exact_rejects_bad_input() {
    let (x, y) = normal_data(10, 1, 1);
    let short = DVector::zeros(9);
    assert!(matches!(mll_exact(&short, &x, &KernelSpec::rbf(), &rbf_params(1, 1.0, 0.1)), Err(GpError::InvalidInput(_))));
    let dup = DMatrix::from_element(10, 1, 0.0);
    let tiny = Hyperparameters::from_raw(1.0, &[1.0], 1e-300).unwrap();
    assert!(matches!(mll_exact(&y, &dup, &KernelSpec::rbf(), &tiny), Err(GpError::Numerical(_))));
}
