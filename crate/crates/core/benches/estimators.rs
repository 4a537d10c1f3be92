use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use varred_gp::kernels::{Hyperparameters, KernelOperator, KernelSpec, OperatorMode};
use varred_gp::likelihood::{mll_evaluate, MllConfig};
use varred_gp::preconditioners::{build_preconditioner, PrecondKind, PrecondSpec};

fn setup(n: usize, mode: OperatorMode) -> (KernelOperator, nalgebra::DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = nalgebra::DVector::from_fn(n, |i, _| x[(i, 0)].sin());
    let p = Hyperparameters::from_raw(1.0, &[0.5], 1e-2).unwrap();
    (KernelOperator::new(KernelSpec::rbf(), x, p, mode).unwrap(), y)
}

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let default = rayon::current_num_threads();
    let mut v = vec![("threads=1".to_string(), rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap())];
    if default > 1 {
        v.push((format!("threads={default}"), rayon::ThreadPoolBuilder::new().num_threads(default).build().unwrap()));
    }
    v
}

fn bench_mll(c: &mut Criterion) {
    let mut group = c.benchmark_group("mll_evaluate");
    group.sample_size(10);
    for (label, mode) in [("dense", OperatorMode::Dense), ("matrix_free", OperatorMode::MatrixFree { block_rows: 64 })] {
        let (op, y) = setup(512, mode);
        let p = build_preconditioner(&op, &PrecondSpec::default_for(PrecondKind::PivotedCholesky), 32, 0).unwrap();
        let cfg = MllConfig { num_probes: 16, ..MllConfig::default() };
        for (name, pool) in pools() {
            group.bench_with_input(BenchmarkId::new(label, &name), &pool, |b, pool| {
                b.iter(|| pool.install(|| mll_evaluate(&y, &op, &p, &cfg, 1).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_mll);
criterion_main!(benches);
