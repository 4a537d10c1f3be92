//! Hyperparameter optimization in log-space.
//!
//! Every step draws one probe seed, shared by all evaluations of that step
//! (the evaluation at the current point and every line-search trial), so the
//! Wolfe conditions compare values of one sampled objective.

mod gp;

use std::collections::VecDeque;
use std::time::Instant;

use crate::error::{invalid, GpError, Result};

pub use gp::{held_out_nll, predictive_mean, ExactGpObjective, GpData, GpObjective};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptMethod {
    Lbfgs,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptConfig {
    pub method: OptMethod,
    pub max_steps: usize,
    pub lbfgs_memory: usize,
    pub armijo_c1: f64,
    pub wolfe_c2: f64,
    pub adam_lr: f64,
    /// Stop after this many steps without a validation improvement.
    pub early_stop_patience: usize,
    /// Share of the non-test data held out for validation.
    pub validation_fraction: f64,
    /// Trials per line search before the step is rejected.
    pub max_line_search: usize,
    /// Stop once `‖∇f‖∞` falls below this.
    pub grad_tol: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            method: OptMethod::Lbfgs,
            max_steps: 20,
            lbfgs_memory: 10,
            armijo_c1: 1e-4,
            wolfe_c2: 0.9,
            adam_lr: 0.1,
            early_stop_patience: 3,
            validation_fraction: 0.2,
            max_line_search: 20,
            grad_tol: 1e-6,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return invalid("max_steps must be at least 1");
        }
        if !(0.0 < self.armijo_c1 && self.armijo_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return invalid(format!("need 0 < c1 < c2 < 1, got c1 {}, c2 {}", self.armijo_c1, self.wolfe_c2));
        }
        if self.lbfgs_memory == 0 || self.max_line_search == 0 {
            return invalid("lbfgs_memory and max_line_search must be positive");
        }
        if !(self.adam_lr > 0.0) || !(self.grad_tol >= 0.0) {
            return invalid("adam_lr must be positive and grad_tol nonnegative");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return invalid("validation_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// A function to minimize, with a sampled value and gradient.
pub trait Objective {
    /// Called at the start of every step with the current point.
    fn begin_step(&mut self, _theta: &[f64]) -> Result<()> {
        Ok(())
    }

    fn evaluate(&mut self, theta: &[f64], seed: u64) -> Result<(f64, Vec<f64>)>;

    /// Held-out metric for early stopping (smaller is better).
    fn validation(&mut self, _theta: &[f64]) -> Result<Option<f64>> {
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub theta: Vec<f64>,
    /// `None` when the evaluation failed.
    pub value: Option<f64>,
    /// Empty when the evaluation failed.
    pub gradient: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub theta: Vec<f64>,
    pub train_objective: f64,
    pub validation: Option<f64>,
    pub model_evaluations_cumulative: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxSteps,
    Converged,
    EarlyStopped,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptTrace {
    pub steps: Vec<StepRecord>,
    pub evaluations: Vec<EvalRecord>,
    pub stop: Option<StopReason>,
    pub notes: Vec<String>,
}

pub fn count_model_evaluations(trace: &OptTrace) -> usize {
    trace.evaluations.len()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptResult {
    /// Best-validation point, or the last point without validation data.
    pub theta: Vec<f64>,
    pub trace: OptTrace,
}

/// Seed of step `k`.
pub fn step_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct Runner<'a, O: Objective + ?Sized> {
    obj: &'a mut O,
    trace: OptTrace,
    start: Instant,
}

impl<O: Objective + ?Sized> Runner<'_, O> {
    fn eval(&mut self, step: usize, theta: &[f64], seed: u64) -> Result<(f64, Vec<f64>)> {
        let r = self.obj.evaluate(theta, seed).and_then(|(f, g)| {
            if f.is_finite() && g.len() == theta.len() && g.iter().all(|v| v.is_finite()) {
                Ok((f, g))
            } else {
                Err(GpError::Numerical("non-finite objective or gradient".into()))
            }
        });
        self.trace.evaluations.push(EvalRecord {
            step,
            theta: theta.to_vec(),
            value: r.as_ref().ok().map(|v| v.0),
            gradient: r.as_ref().map(|v| v.1.clone()).unwrap_or_default(),
            seed,
        });
        r
    }

    fn record(&mut self, step: usize, theta: &[f64], f: f64) -> Result<Option<f64>> {
        let validation = self.obj.validation(theta)?;
        self.trace.steps.push(StepRecord {
            step,
            theta: theta.to_vec(),
            train_objective: f,
            validation,
            model_evaluations_cumulative: self.trace.evaluations.len(),
            wall_time: self.start.elapsed().as_secs_f64(),
        });
        Ok(validation)
    }
}

struct EarlyStop {
    best: f64,
    best_theta: Option<Vec<f64>>,
    since: usize,
}

impl EarlyStop {
    /// Returns true when patience is exhausted.
    fn update(&mut self, v: Option<f64>, theta: &[f64], patience: usize) -> bool {
        let Some(v) = v else { return false };
        if v < self.best || self.best_theta.is_none() {
            self.best = v;
            self.best_theta = Some(theta.to_vec());
            self.since = 0;
            false
        } else {
            self.since += 1;
            patience > 0 && self.since >= patience
        }
    }
}

pub fn optimize<O: Objective + ?Sized>(obj: &mut O, theta0: &[f64], cfg: &OptConfig, seed: u64) -> Result<OptResult> {
    cfg.validate()?;
    if theta0.is_empty() || !theta0.iter().all(|t| t.is_finite()) {
        return invalid("initial point must be nonempty and finite");
    }
    let mut run = Runner { obj, trace: OptTrace::default(), start: Instant::now() };
    let mut x = theta0.to_vec();
    let mut early = EarlyStop { best: f64::INFINITY, best_theta: None, since: 0 };
    let mut lbfgs = Lbfgs::new(cfg.lbfgs_memory);
    let mut adam = Adam::new(x.len(), cfg.adam_lr);
    let mut stop = StopReason::MaxSteps;

    let mut pending_adam = false;
    for k in 1..=cfg.max_steps {
        let s = step_seed(seed, k);
        run.obj.begin_step(&x)?;
        let (f, g) = run.eval(k, &x, s)?;
        if k == 1 || cfg.method == OptMethod::Adam {
            pending_adam = false;
            let v = run.record(k - 1, &x, f)?;
            if early.update(v, &x, cfg.early_stop_patience) {
                stop = StopReason::EarlyStopped;
                break;
            }
        }
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= cfg.grad_tol {
            stop = StopReason::Converged;
            break;
        }
        if cfg.method == OptMethod::Adam {
            x = adam.step(&x, &g);
            pending_adam = true;
            continue;
        }
        let mut p = lbfgs.direction(&g);
        let mut dg = dot(&g, &p);
        if !(dg < 0.0) {
            lbfgs.clear();
            p = g.iter().map(|v| -v).collect();
            dg = dot(&g, &p);
        }
        if lbfgs.is_empty() {
            let norm = dot(&p, &p).sqrt();
            if norm > 1.0 {
                p.iter_mut().for_each(|v| *v /= norm);
                dg /= norm;
            }
        }
        let Some((alpha, fn_, gn)) = line_search(&mut run, k, s, &x, f, &p, dg, cfg) else {
            run.trace.notes.push(format!("step {k}: line search failed after {} trials; step rejected", cfg.max_line_search));
            stop = StopReason::LineSearchFailed;
            break;
        };
        let sv: Vec<f64> = p.iter().map(|v| alpha * v).collect();
        let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        x.iter_mut().zip(&sv).for_each(|(a, b)| *a += b);
        lbfgs.push(sv, yv);
        let v = run.record(k, &x, fn_)?;
        if early.update(v, &x, cfg.early_stop_patience) {
            stop = StopReason::EarlyStopped;
            break;
        }
    }
    if pending_adam {
        let k = cfg.max_steps + 1;
        run.obj.begin_step(&x)?;
        let (f, _) = run.eval(k, &x, step_seed(seed, k))?;
        let v = run.record(cfg.max_steps, &x, f)?;
        early.update(v, &x, cfg.early_stop_patience);
    }
    run.trace.stop = Some(stop);
    let theta = early.best_theta.unwrap_or(x);
    Ok(OptResult { theta, trace: run.trace })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Strong-Wolfe line search (bracketing, then bisection zoom). Returns the
/// step length with the value and gradient there, or `None` when the trial
/// budget is exhausted. Failed evaluations count as `+∞`.
#[allow(clippy::too_many_arguments)]
fn line_search<O: Objective + ?Sized>(
    run: &mut Runner<'_, O>,
    step: usize,
    seed: u64,
    x: &[f64],
    f0: f64,
    p: &[f64],
    dg0: f64,
    cfg: &OptConfig,
) -> Option<(f64, f64, Vec<f64>)> {
    let (c1, c2) = (cfg.armijo_c1, cfg.wolfe_c2);
    let mut trials = 0;
    let mut phi = |alpha: f64, trials: &mut usize| -> Option<(f64, f64, Vec<f64>)> {
        *trials += 1;
        let xt: Vec<f64> = x.iter().zip(p).map(|(a, b)| a + alpha * b).collect();
        run.eval(step, &xt, seed).ok().map(|(f, g)| (f, dot(&g, p), g))
    };
    let armijo = |alpha: f64, f: f64| f <= f0 + c1 * alpha * dg0;
    let curvature = |d: f64| d.abs() <= -c2 * dg0;

    let (mut a_prev, mut f_prev) = (0.0, f0);
    let mut alpha = 1.0;
    let (mut lo, mut hi, mut f_lo);
    loop {
        if trials >= cfg.max_line_search {
            return None;
        }
        match phi(alpha, &mut trials) {
            None => {
                (lo, hi, f_lo) = (a_prev, alpha, f_prev);
                break;
            }
            Some((f, d, g)) => {
                if !armijo(alpha, f) || (a_prev > 0.0 && f >= f_prev) {
                    (lo, hi, f_lo) = (a_prev, alpha, f_prev);
                    break;
                }
                if curvature(d) {
                    return Some((alpha, f, g));
                }
                if d >= 0.0 {
                    (lo, hi, f_lo) = (alpha, a_prev, f);
                    break;
                }
                (a_prev, f_prev) = (alpha, f);
                alpha *= 2.0;
            }
        }
    }
    while trials < cfg.max_line_search {
        let a = 0.5 * (lo + hi);
        match phi(a, &mut trials) {
            None => hi = a,
            Some((f, d, g)) => {
                if !armijo(a, f) || f >= f_lo {
                    hi = a;
                } else {
                    if curvature(d) {
                        return Some((a, f, g));
                    }
                    if d * (hi - lo) >= 0.0 {
                        hi = lo;
                    }
                    lo = a;
                    f_lo = f;
                }
            }
        }
    }
    None
}

struct Lbfgs {
    memory: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

impl Lbfgs {
    fn new(memory: usize) -> Self {
        Lbfgs { memory, pairs: VecDeque::new() }
    }

    fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn clear(&mut self) {
        self.pairs.clear();
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if !(sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt()) {
            return;
        }
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// `−H∇f` by the two-loop recursion.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        q.iter().map(|v| -v).collect()
    }
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam { lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, x: &[f64], g: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        (0..x.len())
            .map(|i| {
                self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
                self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
                x[i] - self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS)
            })
            .collect()
    }
}
