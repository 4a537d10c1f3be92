//! Experiment configuration, read from TOML.
//!
//! ```toml
//! experiment = "bias_variance"
//!
//! [dataset]
//! kind = "synthetic"        # or "csv" with path, target, standardize
//! n = 1000
//! d = 1
//! seed = 0
//!
//! [kernel]
//! family = "rbf"            # rbf, matern12, matern32, matern52, rq
//! outputscale = 1.0
//! lengthscale = 0.5         # one value, or one per input dimension
//! noise = 0.01
//!
//! [preconditioner]
//! kind = "pivchol"          # or a list of kinds
//! ranks = [0, 8, 32]
//!
//! [probes]
//! counts = [4, 8, 16]
//! repetitions = 25
//! seed = 0
//!
//! [solver]
//! max_iters = 1000
//! rel_tol = 1e-6
//!
//! [optimizer]
//! method = "lbfgs"
//! max_steps = 20
//! ```
//!
//! Every table except `[dataset]` is optional. Relative CSV paths resolve
//! against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use varred_gp::kernels::{Hyperparameters, KernelFamily, KernelSpec, MaternNu, OperatorMode};
use varred_gp::krylov::CgConfig;
use varred_gp::likelihood::DENSE_LIMIT;
use varred_gp::optimizer::{OptConfig, OptMethod};
use varred_gp::preconditioners::PrecondSpec;

use crate::error::{input, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    BiasVariance,
    QualityCurves,
    Training,
    ResidualDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        n: usize,
        #[serde(default = "one")]
        d: usize,
        #[serde(default)]
        seed: u64,
        /// Ground-truth hyperparameters of the generating GP.
        #[serde(default)]
        truth: Truth,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    Csv {
        path: PathBuf,
        /// Target column name; the last column when absent.
        #[serde(default)]
        target: Option<String>,
        #[serde(default = "yes")]
        standardize: bool,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truth {
    pub outputscale: f64,
    pub lengthscale: f64,
    pub noise: f64,
}

impl Default for Truth {
    fn default() -> Self {
        Truth { outputscale: 1.0, lengthscale: 0.5, noise: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub family: String,
    pub ard: bool,
    pub rq_alpha: f64,
    pub outputscale: f64,
    pub lengthscale: OneOrMany<f64>,
    pub noise: f64,
    /// `auto`, `dense` or `matrix_free`.
    pub operator: String,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            family: "rbf".into(),
            ard: true,
            rq_alpha: 1.0,
            outputscale: 1.0,
            lengthscale: OneOrMany::One(1.0),
            noise: 1e-2,
            operator: "auto".into(),
        }
    }
}

impl KernelConfig {
    pub fn spec(&self) -> Result<KernelSpec> {
        let family = match self.family.as_str() {
            "rbf" => KernelFamily::Rbf,
            "matern12" => KernelFamily::Matern(MaternNu::Half),
            "matern32" => KernelFamily::Matern(MaternNu::ThreeHalves),
            "matern52" => KernelFamily::Matern(MaternNu::FiveHalves),
            "rq" => KernelFamily::RationalQuadratic { alpha: self.rq_alpha },
            other => return input(format!("unknown kernel family '{other}'")),
        };
        Ok(KernelSpec { family, ard: self.ard })
    }

    pub fn params(&self, d: usize) -> Result<Hyperparameters> {
        let nl = self.spec()?.num_lengthscales(d);
        let ls = match self.lengthscale.to_vec() {
            v if v.len() == 1 => vec![v[0]; nl],
            v if v.len() == nl => v,
            v => return input(format!("kernel.lengthscale has {} values, expected 1 or {nl}", v.len())),
        };
        Ok(Hyperparameters::from_raw(self.outputscale, &ls, self.noise)?)
    }

    pub fn mode(&self, n: usize) -> Result<OperatorMode> {
        match self.operator.as_str() {
            "auto" => Ok(OperatorMode::auto(n, DENSE_LIMIT)),
            "dense" => Ok(OperatorMode::Dense),
            "matrix_free" => Ok(OperatorMode::matrix_free()),
            other => input(format!("unknown kernel.operator '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrecondConfig {
    pub kind: OneOrMany<String>,
    pub ranks: Vec<usize>,
    /// Bias-variance only: pair each probe count with a preconditioner of
    /// the same rank instead of using `ranks`.
    pub matched: bool,
    pub seed: u64,
}

impl Default for PrecondConfig {
    fn default() -> Self {
        PrecondConfig { kind: OneOrMany::One("pivchol".into()), ranks: vec![0, 8, 32, 128], matched: true, seed: 0 }
    }
}

impl PrecondConfig {
    pub fn kinds(&self) -> Result<Vec<(String, PrecondSpec)>> {
        self.kind.to_vec().into_iter().map(|k| Ok((k.clone(), PrecondSpec::parse(&k)?))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub counts: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
    pub share_probes: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { counts: vec![4, 8, 16, 32, 64, 128], repetitions: 25, seed: 0, share_probes: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let c = CgConfig::default();
        SolverConfig { max_iters: c.max_iters, rel_tol: c.rel_tol }
    }
}

impl SolverConfig {
    pub fn cg(&self) -> CgConfig {
        CgConfig { max_iters: self.max_iters, rel_tol: self.rel_tol, collect_tridiag: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: String,
    pub max_steps: usize,
    pub lbfgs_memory: usize,
    pub armijo_c1: f64,
    pub wolfe_c2: f64,
    pub adam_lr: f64,
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub num_probes: usize,
    pub runs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let o = OptConfig::default();
        OptimizerConfig {
            method: "lbfgs".into(),
            max_steps: o.max_steps,
            lbfgs_memory: o.lbfgs_memory,
            armijo_c1: o.armijo_c1,
            wolfe_c2: o.wolfe_c2,
            adam_lr: o.adam_lr,
            early_stop_patience: o.early_stop_patience,
            validation_fraction: o.validation_fraction,
            num_probes: 16,
            runs: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn opt(&self) -> Result<OptConfig> {
        let method = match self.method.as_str() {
            "lbfgs" => OptMethod::Lbfgs,
            "adam" => OptMethod::Adam,
            other => return input(format!("unknown optimizer method '{other}'")),
        };
        let c = OptConfig {
            method,
            max_steps: self.max_steps,
            lbfgs_memory: self.lbfgs_memory,
            armijo_c1: self.armijo_c1,
            wolfe_c2: self.wolfe_c2,
            adam_lr: self.adam_lr,
            early_stop_patience: self.early_stop_patience,
            validation_fraction: self.validation_fraction,
            ..OptConfig::default()
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: Option<Experiment>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub preconditioner: PrecondConfig,
    #[serde(default)]
    pub probes: ProbeConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and validate; relative dataset paths become relative to the file.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let DatasetConfig::Csv { path: p, .. } = &mut cfg.dataset {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
            if !p.exists() {
                return input(format!("dataset file {} does not exist", p.display()));
            }
        }
        Ok((cfg, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Synthetic { n, d, test_fraction, .. } => {
                if *n == 0 || *d == 0 {
                    return input("synthetic dataset needs n >= 1 and d >= 1");
                }
                check_fraction(*test_fraction)?;
            }
            DatasetConfig::Csv { test_fraction, .. } => check_fraction(*test_fraction)?,
        }
        if self.probes.repetitions == 0 {
            return input("probes.repetitions must be at least 1");
        }
        if self.probes.counts.is_empty() || self.probes.counts.contains(&0) {
            return input("probes.counts must be nonempty and positive");
        }
        if self.preconditioner.ranks.is_empty() {
            return input("preconditioner.ranks must be nonempty");
        }
        if self.optimizer.runs == 0 || self.optimizer.num_probes == 0 {
            return input("optimizer.runs and optimizer.num_probes must be positive");
        }
        self.kernel.spec()?;
        self.preconditioner.kinds()?;
        self.solver.cg().validate()?;
        self.optimizer.opt()?;
        Ok(())
    }

    /// `[train, validation, test]` fractions.
    pub fn split_fractions(&self) -> [f64; 3] {
        let t = match &self.dataset {
            DatasetConfig::Synthetic { test_fraction, .. } | DatasetConfig::Csv { test_fraction, .. } => *test_fraction,
        };
        let v = self.optimizer.validation_fraction;
        [(1.0 - t) * (1.0 - v), (1.0 - t) * v, t]
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if !(0.0..1.0).contains(&f) {
        return input(format!("test_fraction must lie in [0, 1), got {f}"));
    }
    Ok(())
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_test_fraction() -> f64 {
    0.2
}
