use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::kernels::{HyperIndex, Hyperparameters, KernelOperator, KernelSpec, OperatorMode};
use crate::krylov::IdentityPreconditioner;
use crate::oracle::{dense_logdet, DensePreconditioner, DenseSpd};
use crate::preconditioners::{build_preconditioner, DiagPlusLowRank, LowRankDerivative, PrecondKind, PrecondSpec};

fn random_spd(n: usize, shift: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * shift
}

fn sign_patterns(n: usize) -> ProbeBatch {
    let h = 1.0 / (n as f64).sqrt();
    let probes = DMatrix::from_fn(n, 1 << n, |i, p| if (p >> i) & 1 == 1 { -h } else { h });
    ProbeBatch { probes, seed: 0 }
}

fn grid_op(n: usize, l: f64, noise: f64) -> KernelOperator {
    let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64);
    let p = Hyperparameters::from_raw(1.0, &[l], noise).unwrap();
    KernelOperator::new(KernelSpec::rbf(), x, p, OperatorMode::Dense).unwrap()
}

fn exact_cfg(n: usize) -> CgConfig {
    CgConfig { max_iters: n, rel_tol: 1e-13, collect_tridiag: false }
}

// ---------- probes ----------

#[test]
fn probes_are_signed_inverse_sqrt_n() {
    let b = make_probes(4, 7, 1).unwrap();
    assert_eq!(b.count(), 7);
    assert!(b.probes.iter().all(|&v| v == 0.5 || v == -0.5));
}

#[test]
fn probe_norms_are_one() {
    for n in [3, 10, 1000] {
        let b = make_probes(n, 5, 2).unwrap();
        for c in b.probes.column_iter() {
            assert!((c.norm() - 1.0).abs() <= 2.0 * f64::EPSILON);
        }
    }
}

#[test]
fn probes_are_deterministic() {
    assert_eq!(make_probes(50, 8, 9).unwrap(), make_probes(50, 8, 9).unwrap());
    assert_ne!(make_probes(50, 8, 9).unwrap().probes, make_probes(50, 8, 10).unwrap().probes);
    assert!(make_probes(0, 1, 0).is_err());
    assert!(make_probes(3, 0, 0).is_err());
}

// ---------- Hutchinson ----------

#[test]
fn hutchinson_identity_is_exact() {
    let b = make_probes(20, 6, 3).unwrap();
    let e = hutchinson(|z| z.dot(z), &b).unwrap();
    assert!(e.per_probe.iter().all(|&q| (q - 20.0).abs() < 1e-12));
    assert!((e.estimate - 20.0).abs() < 1e-12);
    assert!(e.sample_variance < 1e-24);
}

#[test]
fn hutchinson_exhaustive_diag() {
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
    let e = hutchinson(|z| z.dot(&(&a * z)), &sign_patterns(3)).unwrap();
    assert!((e.estimate - 6.0).abs() < 1e-12);
}

#[test]
fn hutchinson_exhaustive_zero_diagonal() {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let e = hutchinson(|z| z.dot(&(&a * z)), &sign_patterns(2)).unwrap();
    assert!(e.estimate.abs() < 1e-12);
}

#[test]
fn hutchinson_reports_bad_probe() {
    let b = make_probes(64, 3, 0).unwrap();
    let first = b.probe(1);
    let err = hutchinson(|z| if *z == first { f64::NAN } else { 1.0 }, &b).unwrap_err();
    assert!(matches!(err, GpError::NonFiniteProbe { probe: 1 }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hutchinson_exhaustive_unbiased(n in 2usize..=4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-5.0..5.0));
        let e = hutchinson(|z| z.dot(&(&a * z)), &sign_patterns(n)).unwrap();
        prop_assert!((e.estimate - a.trace()).abs() <= 1e-12 * a.amax().max(1.0));
    }
}

// ---------- SLQ ----------

#[test]
fn slq_one_by_one() {
    let t = SymTridiagonal::new(vec![2.5], vec![]).unwrap();
    let s = slq_quadrature(&t, f64::ln, None).unwrap();
    assert!((s.value - 2.5f64.ln()).abs() < 1e-15);
    assert_eq!(s.weights, vec![1.0]);
}

#[test]
fn slq_constant_nodes() {
    // A multiple of the identity has a single Ritz value with weight one.
    let a = DMatrix::<f64>::identity(10, 10) * 3.0;
    let z = make_probes(10, 1, 0).unwrap().probe(0);
    let cfg = CgConfig { collect_tridiag: true, ..exact_cfg(10) };
    let r = pcg_solve(&a, &z, &IdentityPreconditioner(10), &cfg, None).unwrap();
    let s = slq_quadrature(r.tridiag.as_ref().unwrap(), f64::ln, None).unwrap();
    assert!((s.value - 3f64.ln()).abs() < 1e-14);
    assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn slq_clamps_negative_nodes() {
    let t = SymTridiagonal::new(vec![-1e-3, 4.0], vec![0.0]).unwrap();
    let s = slq_quadrature(&t, f64::ln, None).unwrap();
    assert_eq!(s.clamped, 1);
    assert!(s.nodes.iter().all(|&x| x >= 4e-12));
    assert!(s.value.is_finite());
    let neg = SymTridiagonal::new(vec![-1.0], vec![]).unwrap();
    assert!(slq_quadrature(&neg, f64::ln, None).is_err());
}

fn slq_matches_dense(n: usize, seed: u64) {
    let a = random_spd(n, 0.5, seed);
    let spd = DenseSpd::new(a.clone()).unwrap();
    let batch = make_probes(n, 4, seed).unwrap();
    let cfg = CgConfig { collect_tridiag: true, ..exact_cfg(n) };
    for i in 0..batch.count() {
        let z = batch.probe(i);
        let r = pcg_solve(&a, &z, &IdentityPreconditioner(n), &cfg, None).unwrap();
        let s = slq_quadrature(r.tridiag.as_ref().unwrap(), f64::ln, None).unwrap();
        let want = spd.quadratic_form(&z, f64::ln);
        let got = r.start_norm_sq * s.value;
        assert!((got - want).abs() <= 1e-8 * want.abs(), "{got} {want}");
        assert!(s.weights.iter().all(|&w| w >= 0.0) && s.weights.iter().sum::<f64>() <= 1.0 + 1e-8);
        let (lo, hi) = (spd.eigenvalues().min(), spd.eigenvalues().max());
        assert!(s.nodes.iter().all(|&x| x >= lo - 1e-8 && x <= hi + 1e-8));
    }
}

#[test]
fn slq_full_run_matches_matrix_log() {
    slq_matches_dense(32, 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn slq_exact_at_full_dimension(n in 2usize..=48, seed in any::<u64>()) {
        slq_matches_dense(n, seed);
    }
}

// ---------- variance-reduced log-determinant ----------

#[test]
fn vr_logdet_perfect_preconditioner() {
    let o = grid_op(64, 0.2, 1e-2);
    let k = o.dense_k_hat();
    let p = DensePreconditioner::new(k.clone()).unwrap();
    let batch = make_probes(64, 8, 1).unwrap();
    let (est, d) = vr_logdet(&o, &p, &batch, &exact_cfg(64)).unwrap();
    let want = dense_logdet(&k).unwrap();
    assert!((est - want).abs() <= 1e-8 * want.abs());
    assert!(d.residual.sample_variance < 1e-16);
    assert!(d.cg_iterations.iter().all(|&m| m == 1));
}

#[test]
fn vr_logdet_identity_preconditioner_within_mc_error() {
    let o = grid_op(64, 0.2, 0.1);
    let p = DiagPlusLowRank::identity(64, o.noise()).unwrap();
    let batch = make_probes(64, 1024, 2).unwrap();
    let (est, d) = vr_logdet(&o, &p, &batch, &exact_cfg(64)).unwrap();
    let want = dense_logdet(&o.dense_k_hat()).unwrap();
    assert!((est - want).abs() <= 3.0 * d.residual.standard_error(), "{est} {want} {}", d.residual.standard_error());
}

#[test]
fn vr_logdet_error_decays_with_matched_rank() {
    let n = 1000;
    let o = grid_op(n, 0.1, 1e-2);
    let want = dense_logdet(&o.dense_k_hat()).unwrap();
    let cfg = CgConfig { max_iters: n, rel_tol: 1e-10, collect_tridiag: false };
    let spec = PrecondSpec::default_for(PrecondKind::PivotedCholesky);
    let ls = [8usize, 16, 32, 64, 128];
    let mut base = Vec::new();
    let mut pre = Vec::new();
    for (i, &l) in ls.iter().enumerate() {
        let batch = make_probes(n, l, 100 + i as u64).unwrap();
        let p0 = DiagPlusLowRank::identity(n, o.noise()).unwrap();
        base.push((vr_logdet(&o, &p0, &batch, &cfg).unwrap().0 - want).abs() / want.abs());
        let p = build_preconditioner(&o, &spec, l, 0).unwrap();
        pre.push((vr_logdet(&o, &p, &batch, &cfg).unwrap().0 - want).abs() / want.abs());
    }
    // Least-squares fit of c·ℓ^{-1/2} to the baseline in log space.
    let log_c = ls.iter().zip(&base).map(|(&l, e)| e.ln() + 0.5 * (l as f64).ln()).sum::<f64>() / ls.len() as f64;
    for (&l, e) in ls.iter().zip(&pre) {
        assert!(*e < log_c.exp() / (l as f64).sqrt(), "{pre:?} {base:?}");
    }
    assert!(pre[4] / pre[0] < (8.0f64 / 128.0).sqrt(), "{pre:?}");
}

// ---------- variance-reduced trace of K̂⁻¹∂K̂ ----------

#[test]
fn vr_trace_perfect_preconditioner_is_n() {
    let o = grid_op(64, 0.2, 1e-2);
    let k = o.dense_k_hat();
    let p = DensePreconditioner::new(k.clone()).unwrap();
    let batch = make_probes(64, 8, 1).unwrap();
    let (est, d) = vr_trace_inv_deriv(&o, &k, &p, &k, &batch, &exact_cfg(64)).unwrap();
    assert!((est - 64.0).abs() <= 1e-8 * 64.0, "{est}");
    assert!(d.residual.sample_variance < 1e-12);
}

#[test]
fn vr_trace_noise_derivative_within_mc_error() {
    let n = 64;
    let o = grid_op(n, 0.2, 0.1);
    let p = DiagPlusLowRank::identity(n, o.noise()).unwrap();
    let dp = p.derivative(&o, HyperIndex::Noise).unwrap();
    let batch = make_probes(n, 512, 5).unwrap();
    let dk = DMatrix::<f64>::identity(n, n);
    let (est, d) = vr_trace_inv_deriv(&o, &dk, &p, &dp, &batch, &exact_cfg(n)).unwrap();
    let want = DenseSpd::new(o.dense_k_hat()).unwrap().inverse().trace();
    assert!((est - want).abs() <= 3.0 * d.residual.standard_error(), "{est} {want}");
}

#[test]
fn vr_trace_variance_drops_with_cholesky_preconditioner() {
    let n = 1000;
    let o = grid_op(n, 0.1, 1e-2);
    let which = HyperIndex::Lengthscale(0);
    let dk = o.deriv_operator(which).unwrap();
    let cfg = CgConfig { max_iters: n, rel_tol: 1e-8, collect_tridiag: false };
    let p0 = DiagPlusLowRank::identity(n, o.noise()).unwrap();
    let dp0 = LowRankDerivative::scaled_identity(n, 0.0);
    let p = build_preconditioner(&o, &PrecondSpec::default_for(PrecondKind::PivotedCholesky), 64, 0).unwrap();
    let dp = p.derivative(&o, which).unwrap();
    let mut ratios = Vec::new();
    for seed in 0..10 {
        let batch = make_probes(n, 8, seed).unwrap();
        let v0 = vr_trace_inv_deriv(&o, &dk, &p0, &dp0, &batch, &cfg).unwrap().1.residual.sample_variance;
        let v = vr_trace_inv_deriv(&o, &dk, &p, &dp, &batch, &cfg).unwrap().1.residual.sample_variance;
        ratios.push(v / v0);
    }
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[5] <= 1.0, "{ratios:?}");
}

#[test]
fn vr_rejects_mismatched_sizes() {
    let o = grid_op(10, 0.2, 0.1);
    let p = DiagPlusLowRank::identity(10, 0.1).unwrap();
    assert!(vr_logdet(&o, &p, &make_probes(11, 2, 0).unwrap(), &CgConfig::default()).is_err());
}

// ---------- decomposition identity ----------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn logdet_decomposition_identity(n in 2usize..=40, seed in any::<u64>()) {
        let k = random_spd(n, 0.1, seed);
        let p = random_spd(n, 0.2, seed.wrapping_add(1));
        let kd = DenseSpd::new(k.clone()).unwrap();
        let pd = DenseSpd::new(p.clone()).unwrap();
        let direct = kd.logdet().unwrap();
        let via_logs = pd.logdet().unwrap() + (kd.matrix_log() - pd.matrix_log()).trace();
        let p_isqrt = pd.matrix_function(|x| 1.0 / x.sqrt());
        let mut s = &p_isqrt * &k * &p_isqrt;
        s = (&s + s.transpose()) * 0.5;
        let via_whitened = pd.logdet().unwrap() + dense_logdet(&s).unwrap();
        prop_assert!((direct - via_logs).abs() <= 1e-8);
        prop_assert!((direct - via_whitened).abs() <= 1e-8);
    }
}
