//! EM state predictor: the mode of `p(x_k | y_0..y_m)` for `m < k`. The
//! filtered set at `m` is pushed through the dynamics (time updates only) to
//! `k - 1`, and EM climbs the empirical predicted density
//! `sum_j w_j W_{k-1}(x - f(p_j))`. There is no measurement term.

use rand::RngCore;

use crate::em::{
    gradient_ascent, multi_start, starting_points, AscentConfig, EmConfig, EmEstimate, EmObjective,
    MStepKind, MStepOutcome,
};
use crate::error::{check_dim, Error, Result};
use crate::mixture::KernelMixture;
use crate::model::StateSpaceModel;
use crate::particle_filter::{time_update, Conditioning, ParticleSet};
use crate::Vector;

/// Time-updates `ps_m` until its step is `target_step`. Weights are never
/// touched; `target_step == ps_m.step()` returns a copy of the input.
pub fn propagate_to(
    model: &dyn StateSpaceModel,
    ps_m: &ParticleSet,
    target_step: usize,
    rng: &mut dyn RngCore,
) -> Result<ParticleSet> {
    if target_step < ps_m.step() {
        return Err(Error::Config(format!(
            "cannot propagate a set at step {} back to {target_step}",
            ps_m.step()
        )));
    }
    let mut ps = ps_m.clone();
    while ps.step() < target_step {
        ps = time_update(model, &ps, rng)?;
    }
    Ok(ps)
}

/// The prediction objective at step `k` from a set describing `k - 1`.
pub struct PredictorObjective<'a> {
    model: &'a dyn StateSpaceModel,
    k: usize,
    mixture: KernelMixture<'a>,
    closed_form: bool,
    ascent: AscentConfig,
}

impl<'a> PredictorObjective<'a> {
    /// `ps_prop` must describe step `k - 1` and be filtered or predicted.
    pub fn new(model: &'a dyn StateSpaceModel, ps_prop: &ParticleSet, k: usize, config: &EmConfig) -> Result<Self> {
        if k == 0 || ps_prop.step() + 1 != k {
            return Err(Error::Config(format!(
                "predicting step {k} needs a particle set at step {}",
                k.saturating_sub(1)
            )));
        }
        if matches!(ps_prop.conditioning(), Conditioning::Smoothed { .. }) {
            return Err(Error::WrongConditioning {
                expected: "filtered or predicted".into(),
                found: ps_prop.conditioning().to_string(),
            });
        }
        check_dim("particle dimension", model.state_dim(), ps_prop.dim())?;
        let closed_form =
            config.m_step == MStepKind::ClosedFormAuto && model.process_noise(k - 1).as_gaussian().is_some();
        Ok(Self {
            model,
            k,
            mixture: KernelMixture::propagated(model, ps_prop),
            closed_form,
            ascent: config.ascent,
        })
    }

    /// `f(x*_{k-1}) + E[w_{k-1}]`.
    pub fn prediction(&self, previous_estimate: &Vector) -> Vector {
        self.model.f(self.k - 1, previous_estimate) + self.model.process_noise(self.k - 1).mean()
    }

    pub fn responsibilities(&self, anchor: &Vector) -> Result<Vec<f64>> {
        self.mixture.responsibilities(anchor)
    }

    pub fn q_hat(&self, x: &Vector, anchor: &Vector) -> Result<f64> {
        self.mixture.weighted_log_kernel(x, &self.responsibilities(anchor)?)
    }

    pub fn q_hat_grad(&self, x: &Vector, anchor: &Vector) -> Result<Vector> {
        check_dim("state", self.model.state_dim(), x.len())?;
        self.mixture.weighted_grad(x, &self.responsibilities(anchor)?)
    }

    /// Log of the empirical predicted density.
    pub fn log_density(&self, x: &Vector) -> Result<f64> {
        self.mixture.log_density(x)
    }

    pub fn gradient_m_step(&self, anchor: &Vector) -> Result<MStepOutcome> {
        let resp = self.responsibilities(anchor)?;
        gradient_ascent(
            |x| self.mixture.weighted_log_kernel(x, &resp),
            |x| self.mixture.weighted_grad(x, &resp),
            anchor,
            &self.ascent,
        )
    }
}

impl EmObjective for PredictorObjective<'_> {
    fn surrogate(&self, x: &Vector, anchor: &Vector) -> Result<f64> {
        self.q_hat(x, anchor)
    }

    fn m_step(&self, anchor: &Vector) -> Result<MStepOutcome> {
        if self.closed_form {
            // Gaussian kernel: the weighted log-kernel peaks at the
            // responsibility-weighted centre.
            let resp = self.responsibilities(anchor)?;
            return Ok(MStepOutcome::closed_form(self.mixture.weighted_center(&resp)));
        }
        self.gradient_m_step(anchor)
    }

    fn log_density(&self, x: &Vector) -> Result<f64> {
        PredictorObjective::log_density(self, x)
    }

    fn step(&self) -> usize {
        self.k
    }
}

pub fn q_hat_pred(
    model: &dyn StateSpaceModel,
    ps_prop: &ParticleSet,
    zeta: &Vector,
    zeta_i: &Vector,
    k: usize,
) -> Result<f64> {
    PredictorObjective::new(model, ps_prop, k, &EmConfig::default())?.q_hat(zeta, zeta_i)
}

pub fn q_hat_pred_grad(
    model: &dyn StateSpaceModel,
    ps_prop: &ParticleSet,
    zeta: &Vector,
    zeta_i: &Vector,
    k: usize,
) -> Result<Vector> {
    PredictorObjective::new(model, ps_prop, k, &EmConfig::default())?.q_hat_grad(zeta, zeta_i)
}

pub fn empirical_predicted_log_density(
    model: &dyn StateSpaceModel,
    ps_prop: &ParticleSet,
    zeta: &Vector,
    k: usize,
) -> Result<f64> {
    PredictorObjective::new(model, ps_prop, k, &EmConfig::default())?.log_density(zeta)
}

/// One EMSP estimate of `x_k` given the filtered set at `m < k`.
/// `zeta_star_prev` is the estimate at `k - 1` (the filter estimate when
/// `k - 1 == m`).
pub fn emsp_step(
    model: &dyn StateSpaceModel,
    ps_m: &ParticleSet,
    k: usize,
    zeta_star_prev: &Vector,
    config: &EmConfig,
    rng: &mut dyn RngCore,
) -> Result<EmEstimate> {
    if k <= ps_m.step() {
        return Err(Error::Config(format!(
            "prediction target {k} must lie after the conditioning step {}",
            ps_m.step()
        )));
    }
    ps_m.require(ps_m.step(), Conditioning::Filtered)?;
    let ps_prop = propagate_to(model, ps_m, k - 1, rng)?;
    estimate_from_propagated(model, &ps_prop, k, zeta_star_prev, config, rng)
}

fn estimate_from_propagated(
    model: &dyn StateSpaceModel,
    ps_prop: &ParticleSet,
    k: usize,
    zeta_star_prev: &Vector,
    config: &EmConfig,
    rng: &mut dyn RngCore,
) -> Result<EmEstimate> {
    config.validate(model.state_dim())?;
    let objective = PredictorObjective::new(model, ps_prop, k, config)?;
    let prediction = objective.prediction(zeta_star_prev);
    let starts = starting_points(config, &prediction, model.process_noise(k - 1), rng);
    multi_start(&objective, &starts, config.rel_tol, config.max_iters)
}

/// One horizon of a multi-step prediction.
#[derive(Debug, Clone)]
pub struct PredictionStep {
    pub k: usize,
    /// Particle set at `k - 1` the estimate was computed from.
    pub propagated: ParticleSet,
    pub estimate: EmEstimate,
}

/// EMSP estimates for `m + 1, ..., m + horizon` from one propagation pass.
/// Each horizon starts from the previous horizon's estimate.
pub fn emsp_horizons(
    model: &dyn StateSpaceModel,
    ps_m: &ParticleSet,
    zeta_star_m: &Vector,
    horizon: usize,
    config: &EmConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<PredictionStep>> {
    ps_m.require(ps_m.step(), Conditioning::Filtered)?;
    let m = ps_m.step();
    let mut steps: Vec<PredictionStep> = Vec::with_capacity(horizon);
    let mut ps = ps_m.clone();
    let mut previous = zeta_star_m.clone();
    for k in m + 1..=m + horizon {
        if ps.step() + 1 < k {
            ps = time_update(model, &ps, rng)?;
        }
        let estimate = estimate_from_propagated(model, &ps, k, &previous, config, rng)?;
        previous = estimate.estimate.clone();
        steps.push(PredictionStep {
            k,
            propagated: ps.clone(),
            estimate,
        });
    }
    Ok(steps)
}
