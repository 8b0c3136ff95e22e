use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mlse::experiment::{run_experiment, write_outputs, Estimator, ExperimentConfig, ExperimentResult};
use mlse::fp_filter::fp_gain;
use mlse::model::builtin;

const STREAMS: &str = "\
Random streams:
  All randomness derives from the master --seed. Each component draws from
  its own ChaCha8 stream, seeded with the master seed and positioned on the
  stream number FNV-1a-64(label):
    trajectory          simulated states and measurements
    particles           particle filter proposals and resampling
    restarts/<name>     random EM starts of estimator <name> (emsf, fpsf, emss, ...)
    propagation/emsp    particle propagation for prediction
  Changing the number of restarts therefore never changes the simulated data
  or the particle filter. Results are identical with and without threads.

Environment:
  MLSE_THREADS  size of the worker pool (default: number of cores)";

#[derive(Parser)]
#[command(
    name = "mlse",
    version,
    about = "Maximum-likelihood state estimation with particle filters and EM",
    after_help = STREAMS
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Filtering: particle mean, EMSF, plus Kalman and FPSF where applicable.
    Filter(Quick),
    /// Prediction: EMSP `--horizon` steps ahead.
    Predict {
        #[command(flatten)]
        quick: Quick,
        #[arg(long, default_value_t = 1)]
        horizon: usize,
    },
    /// Smoothing: FFBS mean, EMSS, plus RTS where applicable.
    Smooth {
        #[command(flatten)]
        quick: Quick,
        /// Fixed-lag smoothing: condition step k on y_0..y_{k+lag}.
        /// Full-interval smoothing when omitted.
        #[arg(long)]
        lag: Option<usize>,
    },
}

/// Flags that override values from a config file.
#[derive(Args, Default)]
struct Overrides {
    /// Built-in model: example1 or example2.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    particles: Option<usize>,
    /// Number of transitions; the run covers k = 0..=steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// EM starts per time step.
    #[arg(long)]
    restarts: Option<usize>,
    /// Relative-change stopping tolerance for EM.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated estimator list, e.g. `kalman,pf-mean,emsf`.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<Estimator>>,
}

#[derive(Args)]
struct Quick {
    #[command(flatten)]
    overrides: Overrides,
}

impl Overrides {
    fn apply(self, config: &mut ExperimentConfig) {
        if let Some(m) = self.model {
            config.model = m;
        }
        if let Some(n) = self.particles {
            config.particles = n;
        }
        if let Some(s) = self.steps {
            config.steps = s;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(r) = self.restarts {
            config.em.restarts = r;
        }
        if let Some(t) = self.tol {
            config.em.rel_tol = t;
        }
        if let Some(m) = self.max_iters {
            config.em.max_iters = m;
        }
        if let Some(o) = self.out {
            config.output_dir = Some(o);
        }
        if let Some(e) = self.estimators {
            config.estimators = e;
        }
    }
}

#[derive(Clone, Copy)]
enum Task {
    Filter,
    Predict,
    Smooth,
}

/// Default estimators for a quick run on `model`.
fn default_estimators(task: Task, model: &str) -> Result<Vec<Estimator>> {
    let model = builtin(model)?;
    let linear = model.as_linear_gaussian().is_some();
    let mut list = Vec::new();
    match task {
        Task::Filter => {
            if linear {
                list.push(Estimator::Kalman);
            }
            list.extend([Estimator::PfMean, Estimator::Emsf]);
            if fp_gain(model.as_ref(), 1).is_ok() {
                list.push(Estimator::Fpsf);
            }
        }
        Task::Predict => {
            if linear {
                list.push(Estimator::Kalman);
            }
            list.push(Estimator::Emsp);
        }
        Task::Smooth => {
            if linear {
                list.push(Estimator::Rts);
            }
            list.extend([Estimator::FfbsMean, Estimator::Emss]);
        }
    }
    Ok(list)
}

fn quick_config(task: Task, overrides: Overrides, horizon: usize) -> Result<ExperimentConfig> {
    let model = overrides.model.clone().unwrap_or_else(|| "example1".into());
    let mut config = ExperimentConfig::new(model.clone(), 1000, 50, 0, default_estimators(task, &model)?);
    config.horizon = horizon;
    config.output_dir = Some(PathBuf::from("results"));
    overrides.apply(&mut config);
    Ok(config)
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("MLSE_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .with_context(|| format!("MLSE_THREADS must be a positive integer, got `{value}`"))?;
    if threads == 0 {
        bail!("MLSE_THREADS must be a positive integer, got `{value}`");
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("building the worker pool")?;
    Ok(())
}

fn report(result: &ExperimentResult) {
    let cfg = &result.config;
    println!(
        "model {} | N = {} | steps = {} | seed = {}",
        cfg.model, cfg.particles, cfg.steps, cfg.seed
    );
    for e in &cfg.estimators {
        let fmt = |v: Option<Vec<f64>>| match v {
            Some(v) => v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" "),
            None => "-".into(),
        };
        let vs_ref = match result.reference_for(*e) {
            Some(name) if !matches!(e, Estimator::Kalman | Estimator::Rts) => {
                format!("  rmse vs {name}: {}", fmt(result.rmse_vs_reference(*e)))
            }
            _ => String::new(),
        };
        let secs = result.timings.get(e.name()).copied().unwrap_or(0.0);
        println!("  {:<14} rmse vs truth: {}{vs_ref}  ({secs:.2}s)", e.name(), fmt(result.rmse_vs_truth(*e)));
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let config = match cli.command {
        Command::Run { config, overrides } => {
            let mut cfg = ExperimentConfig::from_file(&config).with_context(|| format!("reading {}", config.display()))?;
            overrides.apply(&mut cfg);
            cfg
        }
        Command::Filter(q) => quick_config(Task::Filter, q.overrides, 1)?,
        Command::Predict { quick, horizon } => quick_config(Task::Predict, quick.overrides, horizon)?,
        Command::Smooth { quick, lag } => {
            let mut cfg = quick_config(Task::Smooth, quick.overrides, 1)?;
            cfg.lag = lag;
            cfg
        }
    };
    let out = config.output_dir.clone().unwrap_or_else(|| PathBuf::from("results"));
    let result = run_experiment(&config)?;
    let files = write_outputs(&result, &out).with_context(|| format!("writing outputs to {}", out.display()))?;
    report(&result);
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
