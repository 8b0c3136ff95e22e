//! End-to-end experiments: simulate one trajectory, run the requested
//! estimators on it and write `results.csv`, `summary.json` and optional
//! empirical-density grids.
//!
//! Randomness comes from named streams derived from the master seed (see
//! [`crate::rng`]): `trajectory` for the simulation, `particles` for the
//! bootstrap filter, `restarts/<estimator>` for random EM starting points and
//! `propagation/emsp` for the predictor's time updates and restarts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::densities::{GaussianDensity, NoiseDensity, UniformBox};
use crate::em::{EmConfig, MStepKind, StartPolicy};
use crate::em_filter::{emsf_initial, emsf_step, FilterObjective};
use crate::em_predictor::emsp_horizons;
use crate::em_smoother::{emss_estimate, ffbs_smoothed_sets, ffbs_smoothed_window, SmootherInputs};
use crate::error::{Error, Result};
use crate::fp_filter::{fp_gain, fpsf_step};
use crate::kalman;
use crate::model::{builtin, simulate, StateSpaceModel};
use crate::particle_filter::{run_bootstrap, BootstrapRun, ParticleSet};
use crate::rng::{derive_stream, PARTICLES, TRAJECTORY};
use crate::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Kalman filtered mean (linear Gaussian models only).
    Kalman,
    /// RTS smoothed mean (linear Gaussian models only).
    Rts,
    /// Bootstrap particle filter conditional mean.
    PfMean,
    /// FFBS smoothed particle mean.
    FfbsMean,
    Emsf,
    /// EM filter with the gradient-ascent M-step forced.
    EmsfGradient,
    Fpsf,
    Emsp,
    Emss,
}

impl Estimator {
    pub const ALL: [Estimator; 9] = [
        Estimator::Kalman,
        Estimator::Rts,
        Estimator::PfMean,
        Estimator::FfbsMean,
        Estimator::Emsf,
        Estimator::EmsfGradient,
        Estimator::Fpsf,
        Estimator::Emsp,
        Estimator::Emss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Kalman => "kalman",
            Estimator::Rts => "rts",
            Estimator::PfMean => "pf-mean",
            Estimator::FfbsMean => "ffbs-mean",
            Estimator::Emsf => "emsf",
            Estimator::EmsfGradient => "emsf-gradient",
            Estimator::Fpsf => "fpsf",
            Estimator::Emsp => "emsp",
            Estimator::Emss => "emss",
        }
    }

    fn needs_linear_gaussian(self) -> bool {
        matches!(self, Estimator::Kalman | Estimator::Rts)
    }

    fn is_smoother(self) -> bool {
        matches!(self, Estimator::Rts | Estimator::FfbsMean | Estimator::Emss)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartSetting {
    Prediction,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MStepSetting {
    Auto,
    Gradient,
}

/// EM settings as they appear in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSettings {
    pub rel_tol: f64,
    pub max_iters: usize,
    pub restarts: usize,
    pub start: StartSetting,
    /// Random starts uniform on `[lo, hi]` in every coordinate.
    pub restart_uniform: Option<[f64; 2]>,
    /// Random starts from `N(0, std^2 I)`.
    pub restart_gaussian_std: Option<f64>,
    pub m_step: MStepSetting,
}

impl Default for EmSettings {
    fn default() -> Self {
        let d = EmConfig::default();
        Self {
            rel_tol: d.rel_tol,
            max_iters: d.max_iters,
            restarts: d.restarts,
            start: StartSetting::Prediction,
            restart_uniform: None,
            restart_gaussian_std: None,
            m_step: MStepSetting::Auto,
        }
    }
}

impl EmSettings {
    pub fn to_config(&self, state_dim: usize) -> Result<EmConfig> {
        let restart_density: Option<Arc<dyn NoiseDensity>> = match (self.restart_uniform, self.restart_gaussian_std) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("set at most one of restart_uniform and restart_gaussian_std".into()))
            }
            (Some([lo, hi]), None) => Some(Arc::new(UniformBox::cube(state_dim, lo, hi)?)),
            (None, Some(std)) => {
                if !(std > 0.0) {
                    return Err(Error::Config("restart_gaussian_std must be positive".into()));
                }
                Some(Arc::new(GaussianDensity::zero_mean(
                    crate::Matrix::identity(state_dim, state_dim) * (std * std),
                )?))
            }
            (None, None) => None,
        };
        let config = EmConfig {
            rel_tol: self.rel_tol,
            max_iters: self.max_iters,
            restarts: self.restarts,
            start: match self.start {
                StartSetting::Prediction => StartPolicy::PredictionThenRandom,
                StartSetting::Random => StartPolicy::AllRandom,
            },
            restart_density,
            m_step: match self.m_step {
                MStepSetting::Auto => MStepKind::ClosedFormAuto,
                MStepSetting::Gradient => MStepKind::GradientAscent,
            },
            ..EmConfig::default()
        };
        config.validate(state_dim)?;
        Ok(config)
    }
}

/// Grid for exporting the empirical filtered density of a scalar state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lower: f64,
    pub upper: f64,
    pub spacing: f64,
    /// Steps to export; all steps when absent.
    #[serde(default)]
    pub steps: Option<Vec<usize>>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0) || !(self.upper > self.lower) || !self.lower.is_finite() || !self.upper.is_finite() {
            return Err(Error::Config("density grid needs lower < upper and spacing > 0".into()));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<f64> {
        let n = ((self.upper - self.lower) / self.spacing + 1e-9).floor() as usize;
        (0..=n).map(|i| self.lower + i as f64 * self.spacing).collect()
    }
}

fn default_threshold() -> f64 {
    0.5
}

fn default_horizon() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: String,
    pub particles: usize,
    /// Number of transitions; the run covers `k = 0..=steps`.
    pub steps: usize,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
    #[serde(default = "default_threshold")]
    pub resample_threshold: f64,
    /// Prediction horizon for `emsp`.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub em: EmSettings,
    #[serde(default)]
    pub density_grid: Option<GridSpec>,
    /// Fixed-lag smoothing: smoothers at `k` condition on `y_0..y_{k+lag}`
    /// (capped at the last step). Full-interval smoothing when absent.
    #[serde(default)]
    pub lag: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(model: impl Into<String>, particles: usize, steps: usize, seed: u64, estimators: Vec<Estimator>) -> Self {
        Self {
            model: model.into(),
            particles,
            steps,
            seed,
            estimators,
            resample_threshold: default_threshold(),
            horizon: default_horizon(),
            output_dir: None,
            em: EmSettings::default(),
            density_grid: None,
            lag: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    /// Checks everything that can be checked without running, including
    /// estimator/model compatibility.
    pub fn validate(&self, model: &dyn StateSpaceModel) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Config("particles must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.resample_threshold) {
            return Err(Error::Config("resample_threshold must lie in [0, 1]".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators requested".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if matches!(self.lag, Some(l) if l < 2) {
            return Err(Error::Config("lag must be at least 2 (the smoother needs n > k + 1)".into()));
        }
        self.em.to_config(model.state_dim())?;
        for e in &self.estimators {
            if e.needs_linear_gaussian() && model.as_linear_gaussian().is_none() {
                return Err(Error::Config(format!("{e} requires a linear Gaussian model, {} is not", model.name())));
            }
            if *e == Estimator::Fpsf {
                fp_gain(model, 1).map_err(|_| {
                    Error::Config(format!(
                        "fpsf requires a linear measurement with Gaussian noises, {} does not have one",
                        model.name()
                    ))
                })?;
            }
        }
        if let Some(grid) = &self.density_grid {
            grid.validate()?;
            if model.state_dim() != 1 {
                return Err(Error::Config("density grid export needs a scalar state".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRecord {
    pub estimator: Estimator,
    pub value: Vector,
    pub iterations: usize,
    pub converged: bool,
    /// Empirical log-density at the estimate, for the EM estimators.
    pub log_density: Option<f64>,
}

impl EstimateRecord {
    fn reference(estimator: Estimator, value: Vector) -> Self {
        Self {
            estimator,
            value,
            iterations: 0,
            converged: true,
            log_density: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub k: usize,
    pub truth: Vector,
    pub observation: Vector,
    /// In the order the estimators were requested; steps where an estimator
    /// is undefined (e.g. prediction before the horizon) have no entry.
    pub estimates: Vec<EstimateRecord>,
}

impl StepRecord {
    pub fn estimate(&self, e: Estimator) -> Option<&EstimateRecord> {
        self.estimates.iter().find(|r| r.estimator == e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityGrid {
    pub k: usize,
    pub points: Vec<f64>,
    pub log_density: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub records: Vec<StepRecord>,
    /// Reference means for prediction (`horizon` steps ahead), when the model
    /// is linear Gaussian; indexed like `records`.
    pub predicted_reference: Vec<Option<Vector>>,
    pub density_grids: Vec<DensityGrid>,
    /// Wall-clock seconds per estimator (not part of `results.csv`).
    pub timings: BTreeMap<String, f64>,
}

impl ExperimentResult {
    pub fn series(&self, e: Estimator) -> Vec<(usize, &Vector)> {
        self.records
            .iter()
            .filter_map(|r| r.estimate(e).map(|est| (r.k, &est.value)))
            .collect()
    }

    /// Per-component RMSE of `e` against the true states over the steps where
    /// `e` is defined.
    pub fn rmse_vs_truth(&self, e: Estimator) -> Option<Vec<f64>> {
        let pairs: Vec<(&Vector, &Vector)> = self
            .records
            .iter()
            .filter_map(|r| r.estimate(e).map(|est| (&est.value, &r.truth)))
            .collect();
        rmse(&pairs)
    }

    /// The reference an estimator is compared with: Kalman means for filters,
    /// RTS means for smoothers, Kalman predictions for the predictor.
    pub fn reference_for(&self, e: Estimator) -> Option<&'static str> {
        let has = |r: Estimator| self.records.iter().any(|rec| rec.estimate(r).is_some());
        match e {
            Estimator::Emsp => self.predicted_reference.iter().any(Option::is_some).then_some("kalman-predicted"),
            e if e.is_smoother() => has(Estimator::Rts).then_some("rts"),
            _ => has(Estimator::Kalman).then_some("kalman"),
        }
    }

    /// Per-component RMSE of `e` against its reference over the steps where
    /// both are defined.
    pub fn rmse_vs_reference(&self, e: Estimator) -> Option<Vec<f64>> {
        let pairs: Vec<(&Vector, &Vector)> = self
            .records
            .iter()
            .zip(&self.predicted_reference)
            .filter_map(|(r, pred)| {
                let est = &r.estimate(e)?.value;
                let reference = match e {
                    Estimator::Emsp => pred.as_ref()?,
                    e if e.is_smoother() => &r.estimate(Estimator::Rts)?.value,
                    _ => &r.estimate(Estimator::Kalman)?.value,
                };
                Some((est, reference))
            })
            .collect();
        rmse(&pairs)
    }
}

fn rmse(pairs: &[(&Vector, &Vector)]) -> Option<Vec<f64>> {
    let first = pairs.first()?;
    let dim = first.0.len();
    let mut acc = vec![0.0; dim];
    for (a, b) in pairs {
        for i in 0..dim {
            acc[i] += (a[i] - b[i]).powi(2);
        }
    }
    Some(acc.into_iter().map(|s| (s / pairs.len() as f64).sqrt()).collect())
}

/// `(x, log p(x))` of the empirical filtered density over the grid, up to an
/// additive constant. `ps_prev` is the filtered set at `k - 1` (ignored at
/// `k = 0`, where the initial density is used).
pub fn export_density_grid(
    model: &dyn StateSpaceModel,
    ps_prev: Option<&ParticleSet>,
    y: &Vector,
    k: usize,
    grid: &GridSpec,
) -> Result<DensityGrid> {
    grid.validate()?;
    if model.state_dim() != 1 {
        return Err(Error::UnsupportedModel(format!(
            "density grids need a scalar state, {} has dimension {}",
            model.name(),
            model.state_dim()
        )));
    }
    let cfg = EmConfig::default();
    let objective = match (k, ps_prev) {
        (0, _) => FilterObjective::initial(model, y, &cfg)?,
        (_, Some(ps)) => FilterObjective::new(model, ps, y, k, &cfg)?,
        (_, None) => return Err(Error::Config(format!("density grid at step {k} needs the previous set"))),
    };
    let points = grid.points();
    let log_density = crate::par::try_map_range(points.len(), |i| {
        objective.log_density(&Vector::from_element(1, points[i]))
    })?;
    Ok(DensityGrid { k, points, log_density })
}

struct Context<'a> {
    model: &'a dyn StateSpaceModel,
    config: &'a ExperimentConfig,
    em: EmConfig,
    observations: &'a [Vector],
    pf: &'a BootstrapRun,
}

type Track = Vec<Option<EstimateRecord>>;

fn emsf_track(ctx: &Context<'_>, estimator: Estimator, em: &EmConfig) -> Result<Track> {
    let mut rng = derive_stream(ctx.config.seed, &format!("restarts/{estimator}"));
    let mut out: Track = Vec::with_capacity(ctx.observations.len());
    let mut previous: Option<Vector> = None;
    for (k, y) in ctx.observations.iter().enumerate() {
        let est = match &previous {
            None => emsf_initial(ctx.model, y, em, &mut rng)?,
            Some(prev) => emsf_step(ctx.model, ctx.pf.carried(k - 1), y, prev, k, em, &mut rng)?,
        };
        previous = Some(est.estimate.clone());
        out.push(Some(EstimateRecord {
            estimator,
            iterations: est.iterations(),
            converged: est.converged(),
            log_density: Some(est.log_density),
            value: est.estimate,
        }));
    }
    Ok(out)
}

fn fpsf_track(ctx: &Context<'_>) -> Result<Track> {
    let em = EmConfig {
        m_step: MStepKind::ClosedFormAuto,
        ..ctx.em.clone()
    };
    let single = EmConfig {
        restarts: 1,
        start: StartPolicy::PredictionThenRandom,
        ..em.clone()
    };
    let mut out: Track = Vec::with_capacity(ctx.observations.len());
    let mut previous: Option<Vector> = None;
    let mut unused = derive_stream(ctx.config.seed, "restarts/fpsf");
    for (k, y) in ctx.observations.iter().enumerate() {
        let (value, iterations, converged, log_density) = match &previous {
            None => {
                let est = emsf_initial(ctx.model, y, &single, &mut unused)?;
                (est.estimate.clone(), est.iterations(), est.converged(), est.log_density)
            }
            Some(prev) => {
                let start = ctx.model.f(k - 1, prev) + ctx.model.process_noise(k - 1).mean();
                let (x, trace) = fpsf_step(ctx.model, ctx.pf.carried(k - 1), y, &start, k, &em)?;
                (x, trace.iterations(), trace.converged, trace.final_log_likelihood())
            }
        };
        previous = Some(value.clone());
        out.push(Some(EstimateRecord {
            estimator: Estimator::Fpsf,
            value,
            iterations,
            converged,
            log_density: Some(log_density),
        }));
    }
    Ok(out)
}

fn emsp_track(ctx: &Context<'_>, filter: &Track) -> Result<Track> {
    let h = ctx.config.horizon;
    // Propagation noise and random restarts share one stream, consumed in step
    // order.
    let mut rng = derive_stream(ctx.config.seed, "propagation/emsp");
    let mut out: Track = vec![None; ctx.observations.len()];
    for k in h..ctx.observations.len() {
        let m = k - h;
        let start = &filter[m].as_ref().expect("filter track covers every step").value;
        let steps = emsp_horizons(ctx.model, ctx.pf.carried(m), start, h, &ctx.em, &mut rng)?;
        let last = steps.into_iter().last().expect("horizon >= 1");
        out[k] = Some(EstimateRecord {
            estimator: Estimator::Emsp,
            iterations: last.estimate.iterations(),
            converged: last.estimate.converged(),
            log_density: Some(last.estimate.log_density),
            value: last.estimate.estimate,
        });
    }
    Ok(out)
}

/// Smoothed particle sets at `k` and `k + 1` given `y_0..y_n`.
struct SmoothedView {
    n: usize,
    at_k: ParticleSet,
    next: Option<ParticleSet>,
}

/// One view per step: full-interval (`n` = last step) or fixed-lag.
fn smoothed_views(model: &dyn StateSpaceModel, filtered: &[ParticleSet], lag: Option<usize>) -> Result<Vec<SmoothedView>> {
    let last = filtered.len() - 1;
    match lag {
        None => {
            let sets = ffbs_smoothed_sets(model, filtered, last)?;
            Ok((0..=last)
                .map(|k| SmoothedView {
                    n: last,
                    at_k: sets[k].clone(),
                    next: sets.get(k + 1).cloned(),
                })
                .collect())
        }
        Some(lag) => (0..=last)
            .map(|k| {
                let n = (k + lag).min(last);
                let mut window = ffbs_smoothed_window(model, filtered, k, n)?.into_iter();
                let at_k = window.next().expect("window covers k");
                Ok(SmoothedView { n, at_k, next: window.next() })
            })
            .collect(),
    }
}

fn emss_track(ctx: &Context<'_>, filter: &Track, views: &[SmoothedView], filtered: &[ParticleSet]) -> Result<Track> {
    let mut rng = derive_stream(ctx.config.seed, "restarts/emss");
    let mut out: Track = vec![None; ctx.observations.len()];
    for (k, view) in views.iter().enumerate() {
        let Some(next) = view.next.as_ref().filter(|_| view.n > k + 1) else {
            continue;
        };
        let prior = (k > 0).then(|| filtered[k - 1].clone());
        let inputs = SmootherInputs::new(prior, filtered[k].clone(), next.clone(), ctx.observations[k].clone(), view.n)?;
        let start = &filter[k].as_ref().expect("filter track covers every step").value;
        let est = emss_estimate(ctx.model, &inputs, start, &ctx.em, &mut rng)?;
        out[k] = Some(EstimateRecord {
            estimator: Estimator::Emss,
            iterations: est.iterations(),
            converged: est.converged(),
            log_density: Some(est.log_density),
            value: est.estimate,
        });
    }
    Ok(out)
}

/// Runs every requested estimator on one simulated trajectory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let model = builtin(&config.model)?;
    run_experiment_with(model.as_ref(), config)
}

/// [`run_experiment`] for a caller-supplied model (`config.model` is only
/// echoed).
pub fn run_experiment_with(model: &dyn StateSpaceModel, config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate(model)?;
    let em = config.em.to_config(model.state_dim())?;
    let traj = simulate(model, config.steps, &mut derive_stream(config.seed, TRAJECTORY));
    let mut timings = BTreeMap::new();

    let started = Instant::now();
    let pf = run_bootstrap(
        model,
        &traj.observations,
        config.particles,
        config.resample_threshold,
        &mut derive_stream(config.seed, PARTICLES),
    )?;
    timings.insert("particle-filter".to_string(), started.elapsed().as_secs_f64());

    let ctx = Context {
        model,
        config,
        em: em.clone(),
        observations: &traj.observations,
        pf: &pf,
    };
    let wants = |e: Estimator| config.estimators.contains(&e);
    let linear = model.as_linear_gaussian();
    let kalman_run = linear.map(|lg| kalman::run_filter(lg, &traj.observations)).transpose()?;

    let needs_filter_track = wants(Estimator::Emsf) || wants(Estimator::Emsp) || wants(Estimator::Emss);
    let filter_track = if needs_filter_track {
        let t = Instant::now();
        let track = emsf_track(&ctx, Estimator::Emsf, &em)?;
        timings.insert("emsf".into(), t.elapsed().as_secs_f64());
        Some(track)
    } else {
        None
    };
    let needs_smoothing = wants(Estimator::FfbsMean) || wants(Estimator::Emss);
    let filtered_sets = pf.filtered_sets();
    let smoothed_sets = if needs_smoothing {
        let t = Instant::now();
        let sets = smoothed_views(model, &filtered_sets, config.lag)?;
        timings.insert("ffbs".into(), t.elapsed().as_secs_f64());
        Some(sets)
    } else {
        None
    };

    let mut tracks: Vec<Track> = Vec::with_capacity(config.estimators.len());
    for &e in &config.estimators {
        let t = Instant::now();
        let track: Track = match e {
            Estimator::Kalman => {
                let run = kalman_run.as_ref().expect("validated linear Gaussian");
                run.filtered.iter().map(|b| Some(EstimateRecord::reference(e, b.mean.clone()))).collect()
            }
            Estimator::Rts => {
                let run = kalman_run.as_ref().expect("validated linear Gaussian");
                let lg = linear.expect("validated linear Gaussian");
                match config.lag {
                    None => run.smooth(lg)?.into_iter().map(|b| Some(EstimateRecord::reference(e, b.mean))).collect(),
                    Some(lag) => (0..traj.len())
                        .map(|k| {
                            let n = (k + lag).min(config.steps);
                            let run = kalman::run_filter(lg, &traj.observations[..=n])?;
                            let mean = run.smooth(lg)?.swap_remove(k).mean;
                            Ok(Some(EstimateRecord::reference(e, mean)))
                        })
                        .collect::<Result<Track>>()?,
                }
            }
            Estimator::PfMean => pf.means().into_iter().map(|m| Some(EstimateRecord::reference(e, m))).collect(),
            Estimator::FfbsMean => smoothed_sets
                .as_ref()
                .expect("computed above")
                .iter()
                .map(|v| Some(EstimateRecord::reference(e, v.at_k.mean())))
                .collect(),
            Estimator::Emsf => filter_track.clone().expect("computed above"),
            Estimator::EmsfGradient => {
                let em = em.clone().with_m_step(MStepKind::GradientAscent);
                emsf_track(&ctx, e, &em)?
            }
            Estimator::Fpsf => fpsf_track(&ctx)?,
            Estimator::Emsp => emsp_track(&ctx, filter_track.as_ref().expect("computed above"))?,
            Estimator::Emss => emss_track(
                &ctx,
                filter_track.as_ref().expect("computed above"),
                smoothed_sets.as_ref().expect("computed above"),
                &filtered_sets,
            )?,
        };
        timings
            .entry(e.name().to_string())
            .and_modify(|s| *s += t.elapsed().as_secs_f64())
            .or_insert(t.elapsed().as_secs_f64());
        tracks.push(track);
    }

    let records = (0..traj.len())
        .map(|k| StepRecord {
            k,
            truth: traj.states[k].clone(),
            observation: traj.observations[k].clone(),
            estimates: tracks.iter_mut().filter_map(|t| t[k].take()).collect(),
        })
        .collect();

    let predicted_reference = (0..traj.len())
        .map(|k| match (&kalman_run, linear) {
            (Some(run), Some(lg)) if k >= config.horizon => run.predicted_mean(lg, k - config.horizon, config.horizon).ok(),
            _ => None,
        })
        .collect();

    let mut density_grids = Vec::new();
    if let Some(grid) = &config.density_grid {
        let steps: Vec<usize> = match &grid.steps {
            Some(s) => s.iter().copied().filter(|k| *k < traj.len()).collect(),
            None => (0..traj.len()).collect(),
        };
        for k in steps {
            let prev = (k > 0).then(|| pf.carried(k - 1));
            density_grids.push(export_density_grid(model, prev, &traj.observations[k], k, grid)?);
        }
    }

    Ok(ExperimentResult {
        config: config.clone(),
        state_dim: model.state_dim(),
        obs_dim: model.obs_dim(),
        records,
        predicted_reference,
        density_grids,
        timings,
    })
}

/// Header of `results.csv` for the given dimensions.
pub fn results_header(state_dim: usize, obs_dim: usize) -> Vec<String> {
    let mut h = vec!["k".to_string(), "estimator".to_string()];
    h.extend((1..=state_dim).map(|i| format!("est_{i}")));
    h.extend((1..=state_dim).map(|i| format!("true_{i}")));
    h.extend((1..=obs_dim).map(|i| format!("y_{i}")));
    h.push("iters".into());
    h.push("converged".into());
    h
}

#[derive(Serialize)]
struct EstimatorSummary {
    rows: usize,
    rmse_vs_truth: Option<Vec<f64>>,
    reference: Option<&'static str>,
    rmse_vs_reference: Option<Vec<f64>>,
    median_iterations: Option<f64>,
    converged_fraction: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    seeds: BTreeMap<&'static str, String>,
    estimators: BTreeMap<String, EstimatorSummary>,
    timings_seconds: &'a BTreeMap<String, f64>,
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

/// Writes `results.csv`, `summary.json` and one `density_k<k>.csv` per
/// exported grid into `dir` (created if missing). Returns the written paths.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let results_path = dir.join("results.csv");
    let mut w = csv::Writer::from_path(&results_path)?;
    w.write_record(results_header(result.state_dim, result.obs_dim))?;
    for r in &result.records {
        for est in &r.estimates {
            let mut row = vec![r.k.to_string(), est.estimator.name().to_string()];
            row.extend(est.value.iter().map(|x| x.to_string()));
            row.extend(r.truth.iter().map(|x| x.to_string()));
            row.extend(r.observation.iter().map(|x| x.to_string()));
            row.push(est.iterations.to_string());
            row.push(est.converged.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    written.push(results_path);

    let mut estimators = BTreeMap::new();
    for &e in &result.config.estimators {
        let rows: Vec<&EstimateRecord> = result.records.iter().filter_map(|r| r.estimate(e)).collect();
        let em_like = !matches!(e, Estimator::Kalman | Estimator::Rts | Estimator::PfMean | Estimator::FfbsMean);
        estimators.insert(
            e.name().to_string(),
            EstimatorSummary {
                rows: rows.len(),
                rmse_vs_truth: result.rmse_vs_truth(e),
                reference: result.reference_for(e),
                rmse_vs_reference: result.rmse_vs_reference(e),
                median_iterations: if em_like { median(rows.iter().map(|r| r.iterations as f64).collect()) } else { None },
                converged_fraction: if rows.is_empty() {
                    0.0
                } else {
                    rows.iter().filter(|r| r.converged).count() as f64 / rows.len() as f64
                },
            },
        );
    }
    let seed = result.config.seed;
    let mut seeds = BTreeMap::new();
    seeds.insert("master", seed.to_string());
    seeds.insert("derivation", "ChaCha8(seed) with stream id FNV-1a(label)".to_string());
    let summary = Summary {
        config: &result.config,
        seeds,
        estimators,
        timings_seconds: &result.timings,
    };
    let summary_path = dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    written.push(summary_path);

    for grid in &result.density_grids {
        let path = dir.join(format!("density_k{}.csv", grid.k));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["zeta", "density", "log_density"])?;
        for (x, ld) in grid.points.iter().zip(&grid.log_density) {
            w.write_record([x.to_string(), ld.exp().to_string(), ld.to_string()])?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}
