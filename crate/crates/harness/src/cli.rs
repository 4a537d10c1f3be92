//! Command-line front end: `varred <verb> --config <path> [--out <dir>] [--seed <n>]`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use varred_gp::kernels::Hyperparameters;

use crate::config::{DatasetConfig, Experiment, ExperimentConfig};
use crate::data::{gen_synthetic, read_csv, Dataset};
use crate::error::{input, HarnessError, Result};
use crate::experiments;
use crate::output::{content_hash, ensure_dir, Summary};

/// Thread-count override read at startup.
pub const THREADS_ENV: &str = "VARRED_THREADS";

#[derive(Debug, Parser)]
#[command(name = "varred", version, about = "Variance-reduced GP likelihood experiments")]
pub struct Args {
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Generate a synthetic dataset.
    Synth(Common),
    /// Bias and variance of the likelihood estimators.
    BiasVariance(Common),
    /// Preconditioner quality curves, or CG residual decay.
    Quality(Common),
    /// Hyperparameter optimization, baseline against preconditioned.
    Train(Common),
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `probes.seed` (`dataset.seed` for `synth`).
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Verb {
    pub fn common(&self) -> &Common {
        match self {
            Verb::Synth(c) | Verb::BiasVariance(c) | Verb::Quality(c) | Verb::Train(c) => c,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Verb::Synth(_) => "synth",
            Verb::BiasVariance(_) => "bias-variance",
            Verb::Quality(_) => "quality",
            Verb::Train(_) => "train",
        }
    }
}

/// Apply the thread-count override, if set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = match v.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => return input(format!("{THREADS_ENV} must be a positive integer, got '{v}'")),
    };
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| HarnessError::Input(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Vec<u8>>)> {
    match &cfg.dataset {
        DatasetConfig::Synthetic { n, d, seed, truth, .. } => {
            let spec = cfg.kernel.spec()?;
            let ls = vec![truth.lengthscale; spec.num_lengthscales(*d)];
            let params = Hyperparameters::from_raw(truth.outputscale, &ls, truth.noise)?;
            Ok((gen_synthetic(*n, *d, *seed, &spec, &params)?, None))
        }
        DatasetConfig::Csv { path, target, .. } => {
            let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
            Ok((read_csv(path, target.as_deref())?, Some(bytes)))
        }
    }
}

fn check_experiment(verb: &Verb, cfg: &ExperimentConfig) -> Result<Experiment> {
    let wanted = match verb {
        Verb::Synth(_) => return Ok(cfg.experiment.unwrap_or(Experiment::Training)),
        Verb::BiasVariance(_) => &[Experiment::BiasVariance][..],
        Verb::Quality(_) => &[Experiment::QualityCurves, Experiment::ResidualDecay][..],
        Verb::Train(_) => &[Experiment::Training][..],
    };
    match cfg.experiment {
        None => Ok(wanted[0]),
        Some(e) if wanted.contains(&e) => Ok(e),
        Some(e) => input(format!("config is for experiment {e:?}, which the '{}' verb does not run", verb.name())),
    }
}

/// Run one verb end to end; returns the output directory.
pub fn run(args: &Args) -> Result<PathBuf> {
    let start = Instant::now();
    let common = args.verb.common();
    let (mut cfg, text) = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        match (&args.verb, &mut cfg.dataset) {
            (Verb::Synth(_), DatasetConfig::Synthetic { seed, .. }) => *seed = s,
            _ => cfg.probes.seed = s,
        }
    }
    let experiment = check_experiment(&args.verb, &cfg)?;
    let out = common.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    ensure_dir(&out)?;

    let (ds, file_bytes) = load_dataset(&cfg)?;
    let mut inputs: Vec<&[u8]> = vec![text.as_bytes()];
    if let Some(b) = &file_bytes {
        inputs.push(b);
    }
    let mut summary = Summary::new(cfg.to_toml());
    summary.set("verb", args.verb.name());
    summary.set("experiment", format!("{experiment:?}"));
    summary.set("content_hash", format!("sha256:{}", content_hash(&inputs)));
    summary.set("config", common.config.display());
    summary.set("probe_seed", cfg.probes.seed);
    summary.set("threads", varred_gp::parallel::current_num_threads());
    summary.set("n", ds.n());
    summary.set("d", ds.d());

    let result = dispatch(&args.verb, experiment, &cfg, &ds, &out, &mut summary);
    summary.set("status", if result.is_ok() { "ok".to_owned() } else { format!("failed: {}", result.as_ref().unwrap_err()) });
    summary.set("elapsed_seconds", format!("{:.3}", start.elapsed().as_secs_f64()));
    summary.write(&out)?;
    result.map(|_| out)
}

fn dispatch(verb: &Verb, experiment: Experiment, cfg: &ExperimentConfig, ds: &Dataset, out: &Path, summary: &mut Summary) -> Result<()> {
    match verb {
        Verb::Synth(_) => {
            experiments::write_dataset(ds, out)?;
            if let Some(t) = &ds.truth {
                summary.set("truth_log_theta", format!("{:?}", t.to_log_vector()));
            }
        }
        Verb::BiasVariance(_) => {
            experiments::run_bias_variance(cfg, ds, out, summary)?;
        }
        Verb::Quality(_) if experiment == Experiment::ResidualDecay => {
            experiments::run_residual_decay(cfg, ds, out, summary)?;
        }
        Verb::Quality(_) => {
            experiments::run_quality_curves(cfg, ds, out, summary)?;
        }
        Verb::Train(_) => {
            for r in experiments::run_training(cfg, ds, out, summary)? {
                summary.set(&format!("run{}_{}_train_nll", r.run, r.preconditioner), format!("{:e}", r.train_nll));
                summary.set(&format!("run{}_{}_model_evaluations", r.run, r.preconditioner), r.model_evaluations);
            }
        }
    }
    Ok(())
}
