//! Bootstrap particle filter: weighted particle approximations of the
//! predicted, filtered and smoothed state densities.

use std::fmt;

use rand::{Rng, RngCore};

use crate::error::{check_dim, Error, Result};
use crate::model::StateSpaceModel;
use crate::par;
use crate::Vector;

/// Which measurement record a particle set's weights condition on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Conditioned on `y_0..y_given` (or on nothing) at a later step.
    Predicted { given: Option<usize> },
    /// Conditioned on every measurement up to and including its own step.
    Filtered,
    /// Conditioned on `y_0..y_given` with `given` past its own step.
    Smoothed { given: usize },
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Conditioning::Predicted { given: None } => write!(f, "prior"),
            Conditioning::Predicted { given: Some(m) } => write!(f, "predicted-given-{m}"),
            Conditioning::Filtered => write!(f, "filtered"),
            Conditioning::Smoothed { given } => write!(f, "smoothed-given-{given}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    particles: Vec<Vector>,
    weights: Vec<f64>,
    step: usize,
    conditioning: Conditioning,
}

impl ParticleSet {
    /// Builds a set from particles and non-negative weights. Weights are
    /// normalized to sum to one.
    pub fn new(
        particles: Vec<Vector>,
        weights: Vec<f64>,
        step: usize,
        conditioning: Conditioning,
    ) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::Config("a particle set needs at least one particle".into()));
        }
        check_dim("particle weights", particles.len(), weights.len())?;
        let dim = particles[0].len();
        for p in &particles {
            check_dim("particle dimension", dim, p.len())?;
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("particle weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateLikelihood { step });
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self {
            particles,
            weights,
            step,
            conditioning,
        })
    }

    pub fn uniform(particles: Vec<Vector>, step: usize, conditioning: Conditioning) -> Result<Self> {
        let n = particles.len();
        Self::new(particles, vec![1.0; n], step, conditioning)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    pub fn particles(&self) -> &[Vector] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    /// Same particles with new (unnormalized) weights and conditioning.
    pub fn reweighted(&self, weights: Vec<f64>, conditioning: Conditioning) -> Result<Self> {
        Self::new(self.particles.clone(), weights, self.step, conditioning)
    }

    /// Same particles and weights (bit for bit) under a new conditioning.
    pub fn relabeled(&self, conditioning: Conditioning) -> Self {
        Self {
            conditioning,
            ..self.clone()
        }
    }

    /// Errors unless the set has the given step and conditioning.
    pub fn require(&self, step: usize, conditioning: Conditioning) -> Result<()> {
        if self.conditioning != conditioning || self.step != step {
            return Err(Error::WrongConditioning {
                expected: format!("{conditioning} at step {step}"),
                found: format!("{} at step {}", self.conditioning, self.step),
            });
        }
        Ok(())
    }

    /// Weighted mean of the particles.
    pub fn mean(&self) -> Vector {
        let mut acc = Vector::zeros(self.dim());
        for (p, w) in self.particles.iter().zip(&self.weights) {
            acc.axpy(*w, p, 1.0);
        }
        acc
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.ln()).collect()
    }
}

/// `N` draws from the initial density with uniform weights, at step 0.
pub fn init_particles(
    model: &dyn StateSpaceModel,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<ParticleSet> {
    let initial = model.initial_density();
    let particles = (0..n).map(|_| initial.sample(rng)).collect();
    ParticleSet::uniform(particles, 0, Conditioning::Predicted { given: None })
}

/// Propagates every particle through the dynamics with a fresh process noise
/// draw. Weights are copied unchanged.
pub fn time_update(
    model: &dyn StateSpaceModel,
    ps: &ParticleSet,
    rng: &mut dyn RngCore,
) -> Result<ParticleSet> {
    let k = ps.step;
    let conditioning = match ps.conditioning {
        Conditioning::Filtered => Conditioning::Predicted { given: Some(k) },
        Conditioning::Predicted { given } => Conditioning::Predicted { given },
        Conditioning::Smoothed { .. } => {
            return Err(Error::WrongConditioning {
                expected: "filtered or predicted".into(),
                found: ps.conditioning.to_string(),
            })
        }
    };
    let noise = model.process_noise(k);
    // Noise is drawn sequentially so the stream consumption is independent of
    // the thread count.
    let draws: Vec<Vector> = (0..ps.len()).map(|_| noise.sample(rng)).collect();
    let particles = par::map_range(ps.len(), |j| model.f(k, &ps.particles[j]) + &draws[j]);
    Ok(ParticleSet {
        particles,
        weights: ps.weights.clone(),
        step: k + 1,
        conditioning,
    })
}

/// Multiplies each weight by the measurement likelihood `V_k(y - g(x))` and
/// renormalizes in the log domain.
pub fn measurement_update(
    model: &dyn StateSpaceModel,
    ps: &ParticleSet,
    y: &Vector,
) -> Result<ParticleSet> {
    if !matches!(ps.conditioning, Conditioning::Predicted { .. }) {
        return Err(Error::WrongConditioning {
            expected: "predicted".into(),
            found: ps.conditioning.to_string(),
        });
    }
    let k = ps.step;
    check_dim("observation", model.obs_dim(), y.len())?;
    let noise = model.measurement_noise(k);
    let log_lik = par::try_map_range(ps.len(), |j| {
        noise.log_pdf_diff(y, &model.g(k, &ps.particles[j]))
    })?;
    let log_w: Vec<f64> = ps
        .weights
        .iter()
        .zip(&log_lik)
        .map(|(w, l)| if *w > 0.0 { w.ln() + l } else { f64::NEG_INFINITY })
        .collect();
    let weights =
        par::normalize_log_weights(&log_w).ok_or(Error::DegenerateLikelihood { step: k })?;
    Ok(ParticleSet {
        particles: ps.particles.clone(),
        weights,
        step: k,
        conditioning: Conditioning::Filtered,
    })
}

/// Systematic resampling with one uniform offset; the output has uniform
/// weights and the expected copy count of particle `j` is `N w_j`.
pub fn systematic_resample(ps: &ParticleSet, rng: &mut dyn RngCore) -> ParticleSet {
    let n = ps.len();
    let offset: f64 = rng.random();
    let mut particles = Vec::with_capacity(n);
    let mut cumulative = ps.weights[0];
    let mut j = 0;
    for i in 0..n {
        let position = (offset + i as f64) / n as f64;
        while position >= cumulative && j + 1 < n {
            j += 1;
            cumulative += ps.weights[j];
        }
        particles.push(ps.particles[j].clone());
    }
    ParticleSet {
        particles,
        weights: vec![1.0 / n as f64; n],
        step: ps.step,
        conditioning: ps.conditioning,
    }
}

pub fn effective_sample_size(ps: &ParticleSet) -> f64 {
    1.0 / ps.weights.iter().map(|w| w * w).sum::<f64>()
}

/// Output of one bootstrap filter step.
#[derive(Debug, Clone)]
pub struct BootstrapStep {
    /// Weighted filtered set before any resampling.
    pub filtered: ParticleSet,
    /// The set carried to the next step: resampled if resampling fired,
    /// otherwise identical to `filtered`.
    pub carried: ParticleSet,
    pub resampled: bool,
    /// Conditional mean of the filtered density.
    pub mean: Vector,
}

fn finish_step(
    filtered: ParticleSet,
    rng: &mut dyn RngCore,
    resample_threshold: f64,
) -> BootstrapStep {
    let mean = filtered.mean();
    let resampled = effective_sample_size(&filtered) < resample_threshold * filtered.len() as f64;
    let carried = if resampled {
        systematic_resample(&filtered, rng)
    } else {
        filtered.clone()
    };
    BootstrapStep {
        filtered,
        carried,
        resampled,
        mean,
    }
}

/// Time update, measurement update, then systematic resampling when the
/// effective sample size drops below `resample_threshold * N`.
pub fn bootstrap_filter_step(
    model: &dyn StateSpaceModel,
    ps: &ParticleSet,
    y: &Vector,
    rng: &mut dyn RngCore,
    resample_threshold: f64,
) -> Result<BootstrapStep> {
    let predicted = time_update(model, ps, rng)?;
    let filtered = measurement_update(model, &predicted, y)?;
    Ok(finish_step(filtered, rng, resample_threshold))
}

/// Step 0: sample the initial density and weight by `y_0`.
pub fn bootstrap_initial_step(
    model: &dyn StateSpaceModel,
    n: usize,
    y0: &Vector,
    rng: &mut dyn RngCore,
    resample_threshold: f64,
) -> Result<BootstrapStep> {
    let prior = init_particles(model, n, rng)?;
    let filtered = measurement_update(model, &prior, y0)?;
    Ok(finish_step(filtered, rng, resample_threshold))
}

/// A full bootstrap filter pass over `y_0..y_T`.
#[derive(Debug, Clone)]
pub struct BootstrapRun {
    pub steps: Vec<BootstrapStep>,
}

impl BootstrapRun {
    pub fn filtered(&self, k: usize) -> &ParticleSet {
        &self.steps[k].filtered
    }

    pub fn carried(&self, k: usize) -> &ParticleSet {
        &self.steps[k].carried
    }

    pub fn filtered_sets(&self) -> Vec<ParticleSet> {
        self.steps.iter().map(|s| s.filtered.clone()).collect()
    }

    pub fn means(&self) -> Vec<Vector> {
        self.steps.iter().map(|s| s.mean.clone()).collect()
    }
}

pub fn run_bootstrap(
    model: &dyn StateSpaceModel,
    observations: &[Vector],
    n: usize,
    resample_threshold: f64,
    rng: &mut dyn RngCore,
) -> Result<BootstrapRun> {
    let mut steps: Vec<BootstrapStep> = Vec::with_capacity(observations.len());
    for (k, y) in observations.iter().enumerate() {
        let step = if k == 0 {
            bootstrap_initial_step(model, n, y, rng, resample_threshold)?
        } else {
            bootstrap_filter_step(model, &steps[k - 1].carried, y, rng, resample_threshold)?
        };
        steps.push(step);
    }
    Ok(BootstrapRun { steps })
}
