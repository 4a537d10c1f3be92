//! The four experiments. Each writes its CSV tables into the output directory
//! and records headline numbers in the run summary.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use varred_gp::kernels::{HyperIndex, Hyperparameters, KernelOperator, KernelSpec, OperatorMode};
use varred_gp::krylov::{pcg_solve, CgConfig};
use varred_gp::likelihood::{mll_evaluate, mll_exact, MllConfig, DENSE_LIMIT};
use varred_gp::optimizer::{
    count_model_evaluations, held_out_nll, optimize, predictive_mean, GpData, GpObjective, OptResult, StopReason,
};
use varred_gp::oracle::DenseSpd;
use varred_gp::parallel::map_indexed;
use varred_gp::preconditioners::{build_preconditioner, function_error, DiagPlusLowRank, MatrixFunction, PrecondSpec};

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::data::{split_dataset, Block, Dataset, Splits};
use crate::error::{input, HarnessError, Result};
use crate::output::{Summary, Table};
use crate::row;

/// Seed for repetition `rep` of a configuration with `count` probes. Paired
/// configurations share it.
pub fn repetition_seed(base: u64, count: usize, rep: usize) -> u64 {
    let mut z = base ^ ((count as u64) << 32) ^ rep as u64;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn gradient_names(params: &Hyperparameters) -> Vec<String> {
    params
        .indices()
        .into_iter()
        .map(|i| match i {
            HyperIndex::OutputScale => "d_log_outputscale".to_owned(),
            HyperIndex::Lengthscale(j) => format!("d_log_lengthscale_{j}"),
            HyperIndex::Noise => "d_log_noise".to_owned(),
        })
        .collect()
}

fn standardize_flag(cfg: &ExperimentConfig) -> bool {
    matches!(cfg.dataset, DatasetConfig::Csv { standardize: true, .. })
}

/// All rows, standardized with their own statistics when configured.
fn full_block(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Block> {
    Ok(split_dataset(ds, [1.0, 0.0, 0.0], 0, standardize_flag(cfg))?.train)
}

fn require_dense(n: usize, what: &str) -> Result<()> {
    if n > DENSE_LIMIT {
        return input(format!("{what} needs the dense reference; n = {n} exceeds {DENSE_LIMIT}"));
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var)
}

/// One line of the bias-variance summary.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasVarianceStat {
    pub preconditioner: String,
    pub count: usize,
    pub rank: usize,
    pub quantity: String,
    pub exact: f64,
    pub mean: f64,
    pub rel_bias: f64,
    pub sample_variance: f64,
    pub median_rel_error: f64,
}

/// Repeated estimates of `L` and `∂L/∂ log θ` against the dense values.
pub fn run_bias_variance(cfg: &ExperimentConfig, ds: &Dataset, out: &Path, summary: &mut Summary) -> Result<Vec<BiasVarianceStat>> {
    let data = full_block(cfg, ds)?;
    let n = data.n();
    require_dense(n, "bias-variance")?;
    let spec = cfg.kernel.spec()?;
    let params = cfg.kernel.params(data.x.ncols())?;
    let (exact_value, exact_grad) = mll_exact(&data.y, &data.x, &spec, &params)?;
    let exact: Vec<f64> = std::iter::once(exact_value).chain(exact_grad).collect();
    let names: Vec<String> = std::iter::once("value".to_owned()).chain(gradient_names(&params)).collect();

    let op = KernelOperator::new(spec, data.x.clone(), params, cfg.kernel.mode(n)?)?;
    let kinds = cfg.preconditioner.kinds()?;

    let mut header = vec!["preconditioner", "count", "rank", "repetition", "seed", "cg_iterations"];
    header.extend(names.iter().map(String::as_str));
    let mut runs = Table::create(out, "bias_variance_runs", &header)?;
    let mut stats_table = Table::create(
        out,
        "bias_variance_summary",
        &["preconditioner", "count", "rank", "quantity", "exact", "mean", "rel_bias", "sample_variance", "median_rel_error"],
    )?;
    let mut stats = Vec::new();

    for &count in &cfg.probes.counts {
        let mut configs: Vec<(String, PrecondSpec, usize)> = vec![("none".into(), PrecondSpec::Identity, 0)];
        for (name, pspec) in &kinds {
            let ranks = if cfg.preconditioner.matched { vec![count] } else { cfg.preconditioner.ranks.clone() };
            for r in ranks {
                if r > 0 && !matches!(pspec, PrecondSpec::Identity) && !configs.iter().any(|(k, _, rr)| k == name && *rr == r) {
                    configs.push((name.clone(), *pspec, r));
                }
            }
        }
        let mll = MllConfig { cg: cfg.solver.cg(), num_probes: count, share_probes: cfg.probes.share_probes };
        for (name, pspec, rank) in configs {
            let p = build_preconditioner(&op, &pspec, rank, cfg.preconditioner.seed)?;
            let reps = map_indexed(cfg.probes.repetitions, |rep| {
                let seed = repetition_seed(cfg.probes.seed, count, rep);
                mll_evaluate(&data.y, &op, &p, &mll, seed).map(|e| (seed, e))
            });
            let mut samples: Vec<Vec<f64>> = vec![Vec::new(); exact.len()];
            for (rep, r) in reps.into_iter().enumerate() {
                let (seed, e) = r?;
                let mut cells = row![name.as_str(), count, rank, rep, seed, e.solve_iterations];
                cells.push(e.value.into());
                cells.extend(e.gradient.iter().map(|&g| g.into()));
                runs.push(cells)?;
                samples[0].push(e.value);
                for (k, g) in e.gradient.iter().enumerate() {
                    samples[k + 1].push(*g);
                }
            }
            runs.flush()?;
            for (k, s) in samples.into_iter().enumerate() {
                let scale = exact[k].abs().max(f64::MIN_POSITIVE);
                let (mean, var) = mean_var(&s);
                let med = median(s.iter().map(|v| (v - exact[k]).abs() / scale).collect());
                let st = BiasVarianceStat {
                    preconditioner: name.clone(),
                    count,
                    rank,
                    quantity: names[k].clone(),
                    exact: exact[k],
                    mean,
                    rel_bias: (mean - exact[k]) / scale,
                    sample_variance: var,
                    median_rel_error: med,
                };
                stats_table.push(row![
                    st.preconditioner.as_str(),
                    count,
                    rank,
                    st.quantity.as_str(),
                    st.exact,
                    st.mean,
                    st.rel_bias,
                    st.sample_variance,
                    st.median_rel_error
                ])?;
                stats.push(st);
            }
            stats_table.flush()?;
        }
    }
    summary.set("exact_mll", exact_value);
    summary.set("n", n);
    Ok(stats)
}

/// One point of a quality curve.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityPoint {
    pub preconditioner: String,
    pub rank: usize,
    pub repetition: usize,
    pub rel_frobenius: f64,
    pub rel_err_log: f64,
    pub rel_err_inv: f64,
    pub condition_number: f64,
}

/// `κ(P̂^{-1/2} K̂ P̂^{-1/2})` by dense linear algebra.
pub fn preconditioned_condition_number(k_hat: &DMatrix<f64>, p: &DiagPlusLowRank) -> Result<f64> {
    let chol = p
        .dense()
        .cholesky()
        .ok_or_else(|| HarnessError::Numerical("preconditioner is not positive definite".into()))?;
    let l = chol.l();
    let a = l
        .solve_lower_triangular(k_hat)
        .and_then(|m| l.solve_lower_triangular(&m.transpose()))
        .ok_or_else(|| HarnessError::Numerical("singular preconditioner factor".into()))?;
    let sym = (&a + a.transpose()) * 0.5;
    Ok(DenseSpd::new(sym)?.condition_number())
}

/// Preconditioner approximation errors per builder and rank.
pub fn run_quality_curves(cfg: &ExperimentConfig, ds: &Dataset, out: &Path, summary: &mut Summary) -> Result<Vec<QualityPoint>> {
    let data = full_block(cfg, ds)?;
    let n = data.n();
    require_dense(n, "quality curves")?;
    let spec = cfg.kernel.spec()?;
    let params = cfg.kernel.params(data.x.ncols())?;
    let op = KernelOperator::new(spec, data.x.clone(), params, OperatorMode::Dense)?;
    let k_hat = op.dense_k_hat();
    let oracle = DenseSpd::new(k_hat.clone())?;
    let k_norm = k_hat.norm();

    let mut table = Table::create(
        out,
        "quality_curves",
        &["preconditioner", "rank", "repetition", "rel_frobenius", "rel_err_log", "rel_err_inv", "condition_number"],
    )?;
    let mut points = Vec::new();
    for (name, pspec) in cfg.preconditioner.kinds()? {
        for &rank in &cfg.preconditioner.ranks {
            let reps = map_indexed(cfg.probes.repetitions, |rep| -> Result<QualityPoint> {
                let p = build_preconditioner(&op, &pspec, rank, cfg.preconditioner.seed.wrapping_add(rep as u64))?;
                Ok(QualityPoint {
                    preconditioner: name.clone(),
                    rank,
                    repetition: rep,
                    rel_frobenius: (&k_hat - p.dense()).norm() / k_norm,
                    rel_err_log: function_error(&oracle, &p, MatrixFunction::Log)?,
                    rel_err_inv: function_error(&oracle, &p, MatrixFunction::Inverse)?,
                    condition_number: preconditioned_condition_number(&k_hat, &p)?,
                })
            });
            for q in reps {
                let q = q?;
                table.push(row![
                    q.preconditioner.as_str(),
                    q.rank,
                    q.repetition,
                    q.rel_frobenius,
                    q.rel_err_log,
                    q.rel_err_inv,
                    q.condition_number
                ])?;
                points.push(q);
            }
            table.flush()?;
        }
    }
    summary.set("n", n);
    summary.set("kernel_condition_number", oracle.condition_number());
    Ok(points)
}

/// CG relative residual per iteration for each builder and rank, solving
/// `K̂ u = y`.
pub fn run_residual_decay(cfg: &ExperimentConfig, ds: &Dataset, out: &Path, summary: &mut Summary) -> Result<Vec<(String, usize, Vec<f64>)>> {
    let data = full_block(cfg, ds)?;
    let n = data.n();
    let spec = cfg.kernel.spec()?;
    let params = cfg.kernel.params(data.x.ncols())?;
    let op = KernelOperator::new(spec, data.x.clone(), params, cfg.kernel.mode(n)?)?;
    let cg = cfg.solver.cg();
    let mut table = Table::create(out, "residual_decay", &["preconditioner", "rank", "iteration", "rel_residual"])?;
    let mut curves = Vec::new();
    for (name, pspec) in cfg.preconditioner.kinds()? {
        for &rank in &cfg.preconditioner.ranks {
            let p = build_preconditioner(&op, &pspec, rank, cfg.preconditioner.seed)?;
            let r = pcg_solve(&op, &data.y, &p, &cg, None)?;
            for (it, res) in r.residual_history.iter().enumerate() {
                table.push(row![name.as_str(), rank, it + 1, *res])?;
            }
            table.flush()?;
            summary.set(&format!("iterations_{name}_{rank}"), r.iterations_used);
            curves.push((name.clone(), rank, r.residual_history));
        }
    }
    summary.set("n", n);
    Ok(curves)
}

/// Outcome of one optimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub run: usize,
    pub preconditioner: String,
    pub rank: usize,
    pub seed: u64,
    pub steps: usize,
    pub stop: String,
    pub theta: Vec<f64>,
    pub train_nll: f64,
    pub validation_nll: Option<f64>,
    pub test_nll: Option<f64>,
    pub test_rmse: Option<f64>,
    pub model_evaluations: usize,
    pub wall_time: f64,
    pub speedup: f64,
}

fn stop_name(s: Option<StopReason>) -> &'static str {
    match s {
        Some(StopReason::MaxSteps) | None => "max_steps",
        Some(StopReason::Converged) => "converged",
        Some(StopReason::EarlyStopped) => "early_stopped",
        Some(StopReason::LineSearchFailed) => "line_search_failed",
    }
}

/// Test-set RMSE of the posterior mean at `params`, in the units of `train.y`.
pub fn test_rmse(train: &GpData, test: &Block, spec: &KernelSpec, params: &Hyperparameters, precond: &PrecondSpec, rank: usize, cg: &CgConfig) -> Result<f64> {
    let n = train.n();
    let op = KernelOperator::new(*spec, train.x.clone(), params.clone(), OperatorMode::auto(n, DENSE_LIMIT))?;
    let u = if n <= DENSE_LIMIT {
        op.dense_k_hat()
            .cholesky()
            .ok_or_else(|| HarnessError::Numerical("K̂ is not positive definite at the fitted hyperparameters".into()))?
            .solve(&train.y)
    } else {
        let p = build_preconditioner(&op, precond, rank.min(n), 0)?;
        let tight = CgConfig { rel_tol: cg.rel_tol.min(1e-8), ..*cg };
        pcg_solve(&op, &train.y, &p, &tight, None)?.solution
    };
    let mu = predictive_mean(spec, params, &train.x, &u, &test.x)?;
    Ok(((&mu - &test.y).norm_squared() / test.n() as f64).sqrt())
}

fn nll_per_point(block: &GpData, spec: &KernelSpec, params: &Hyperparameters, precond: &PrecondSpec, rank: usize, mll: &MllConfig) -> Result<f64> {
    Ok(held_out_nll(block, spec, params, precond, rank, mll)?)
}

/// Paired optimization runs, rank 0 against the largest configured rank.
pub fn run_training(cfg: &ExperimentConfig, ds: &Dataset, out: &Path, summary: &mut Summary) -> Result<Vec<TrainingRun>> {
    let splits = split_dataset(ds, cfg.split_fractions(), cfg.probes.seed, standardize_flag(cfg))?;
    write_splits(&splits, out)?;
    let train = splits
        .train
        .gp_data()
        .ok_or_else(|| HarnessError::Input("training split is empty".into()))?;
    let val = splits.validation.gp_data();
    let spec = cfg.kernel.spec()?;
    let init = cfg.kernel.params(train.x.ncols())?;
    let opt = cfg.optimizer.opt()?;
    let mll = MllConfig { cg: cfg.solver.cg(), num_probes: cfg.optimizer.num_probes, share_probes: cfg.probes.share_probes };
    let mode = cfg.kernel.mode(train.n())?;
    let top = cfg.preconditioner.ranks.iter().copied().max().unwrap_or(0).min(train.n());
    let (kind_name, kind) = cfg.preconditioner.kinds()?.remove(0);
    let configs = [("none".to_owned(), PrecondSpec::Identity, 0), (kind_name, kind, top)];

    let names = gradient_names(&init);
    let mut trace_header = vec!["run", "preconditioner", "rank", "step", "train_objective", "validation", "model_evaluations", "wall_time"];
    let theta_names: Vec<String> = names.iter().map(|g| g.trim_start_matches("d_").to_owned()).collect();
    trace_header.extend(theta_names.iter().map(String::as_str));
    let mut trace = Table::create(out, "training_trace", &trace_header)?;
    let mut table = Table::create(
        out,
        "training_runs",
        &[
            "run",
            "preconditioner",
            "rank",
            "seed",
            "steps",
            "stop",
            "train_nll",
            "validation_nll",
            "test_nll",
            "test_rmse",
            "model_evaluations",
            "wall_time",
            "speedup",
        ],
    )?;
    let test = splits.test.gp_data();
    let opt_cell = |v: Option<f64>| v.map_or(crate::output::Cell::S(String::new()), crate::output::Cell::F);

    let mut runs = Vec::new();
    for run in 0..cfg.optimizer.runs {
        let seed = cfg.probes.seed.wrapping_add(run as u64);
        let mut baseline_time = None;
        for (name, pspec, rank) in &configs {
            let mut obj = GpObjective::new(train.clone(), val.clone(), spec, *pspec, *rank, mll);
            obj.mode = mode;
            obj.precond_seed = cfg.preconditioner.seed;
            let start = Instant::now();
            let OptResult { theta, trace: tr } = optimize(&mut obj, &init.to_log_vector(), &opt, seed)?;
            let wall = start.elapsed().as_secs_f64();
            let params = Hyperparameters::from_log_vector(&theta)?;
            for s in &tr.steps {
                let mut cells = row![run, name.as_str(), *rank, s.step, s.train_objective];
                cells.push(opt_cell(s.validation));
                cells.extend(row![s.model_evaluations_cumulative, s.wall_time]);
                cells.extend(s.theta.iter().map(|&t| t.into()));
                trace.push(cells)?;
            }
            trace.flush()?;
            let base = *baseline_time.get_or_insert(wall);
            let r = TrainingRun {
                run,
                preconditioner: name.clone(),
                rank: *rank,
                seed,
                steps: tr.steps.len().saturating_sub(1),
                stop: stop_name(tr.stop).to_owned(),
                train_nll: nll_per_point(&train, &spec, &params, pspec, *rank, &mll)?,
                validation_nll: val.as_ref().map(|v| nll_per_point(v, &spec, &params, pspec, *rank, &mll)).transpose()?,
                test_nll: test.as_ref().map(|t| nll_per_point(t, &spec, &params, pspec, *rank, &mll)).transpose()?,
                test_rmse: if splits.test.n() > 0 {
                    Some(test_rmse(&train, &splits.test, &spec, &params, pspec, *rank, &mll.cg)?)
                } else {
                    None
                },
                model_evaluations: count_model_evaluations(&tr),
                wall_time: wall,
                speedup: base / wall.max(1e-12),
                theta,
            };
            let mut cells = row![run, r.preconditioner.as_str(), r.rank, r.seed, r.steps, r.stop.as_str(), r.train_nll];
            cells.extend([opt_cell(r.validation_nll), opt_cell(r.test_nll), opt_cell(r.test_rmse)]);
            cells.extend(row![r.model_evaluations, r.wall_time, r.speedup]);
            table.push(cells)?;
            table.flush()?;
            runs.push(r);
        }
    }

    summary.set("n_train", train.n());
    summary.set("n_validation", splits.validation.n());
    summary.set("n_test", splits.test.n());
    if let (Some(truth), true) = (&ds.truth, splits.test.n() > 0) {
        let rmse = test_rmse(&train, &splits.test, &spec, truth, &PrecondSpec::Identity, 0, &mll.cg)?;
        summary.set("truth_test_rmse", format!("{rmse:e}"));
    }
    Ok(runs)
}

fn write_splits(s: &Splits, out: &Path) -> Result<()> {
    let mut t = Table::create(out, "splits", &["row", "split"])?;
    for (i, which) in s.assignment.iter().enumerate() {
        t.push(row![i, which.name()])?;
    }
    t.flush()?;
    if let Some(st) = &s.standardization {
        let mut t = Table::create(out, "standardization", &["column", "mean", "std"])?;
        for (j, (m, sd)) in st.x_mean.iter().zip(&st.x_std).enumerate() {
            t.push(row![format!("x{j}"), *m, *sd])?;
        }
        t.push(row!["target", st.y_mean, st.y_std])?;
        t.flush()?;
    }
    Ok(())
}

/// Write a generated dataset as CSV (features then target).
pub fn write_dataset(ds: &Dataset, out: &Path) -> Result<()> {
    let mut header: Vec<&str> = ds.feature_names.iter().map(String::as_str).collect();
    header.push(&ds.target_name);
    let mut t = Table::create(out, "synthetic", &header)?;
    for i in 0..ds.n() {
        let mut cells: Vec<_> = ds.x.row(i).iter().map(|&v| v.into()).collect();
        cells.push(ds.y[i].into());
        t.push(cells)?;
    }
    t.flush()
}
