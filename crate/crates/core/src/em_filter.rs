//! EM state filter: the mode of `p(x_k | y_0..y_k)` by EM iterations on the
//! particle approximation of the surrogate
//!
//! ```text
//! Q(x, x^i) = sum_j [log V_k(y_k - g(x)) + log W_{k-1}(x - f(p_j))] r_j(x^i)
//! r_j(x^i) ∝ W_{k-1}(x^i - f(p_j)) w_j
//! ```
//!
//! where `p_j, w_j` is the filtered particle set at `k - 1`. The iterates climb
//! the empirical filtered density `V_k(y_k - g(x)) sum_j w_j W_{k-1}(x - f(p_j))`.
//!
//! Step 0 has no previous particle set; there the objective is
//! `log V_0(y_0 - g(x)) + log p_0(x)`, which has no latent variable, so each
//! "M-step" maximizes it directly.

use rand::RngCore;

use crate::densities::NoiseDensity;
use crate::em::{
    gradient_ascent, multi_start, starting_points, AscentConfig, EmConfig, EmEstimate, EmObjective,
    MStepKind, MStepOutcome,
};
use crate::error::{check_dim, Error, Result};
use crate::fp_filter::{fp_gain, linear_gaussian_gain, FpGain};
use crate::mixture::KernelMixture;
use crate::model::StateSpaceModel;
use crate::particle_filter::{Conditioning, ParticleSet};
use crate::Vector;

enum PriorTerm<'a> {
    Mixture(KernelMixture<'a>),
    Initial(&'a dyn NoiseDensity),
}

/// The filtering objective at one time step.
pub struct FilterObjective<'a> {
    model: &'a dyn StateSpaceModel,
    y: Vector,
    k: usize,
    prior: PriorTerm<'a>,
    m_step: MStepKind,
    ascent: AscentConfig,
    closed_form: Option<FpGain>,
}

impl<'a> FilterObjective<'a> {
    /// Objective at step `k >= 1` from the filtered set at `k - 1`.
    pub fn new(
        model: &'a dyn StateSpaceModel,
        ps_prev: &ParticleSet,
        y: &Vector,
        k: usize,
        config: &EmConfig,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("step 0 has no previous filtered set; use FilterObjective::initial".into()));
        }
        ps_prev.require(k - 1, Conditioning::Filtered)?;
        check_dim("observation", model.obs_dim(), y.len())?;
        check_dim("particle dimension", model.state_dim(), ps_prev.dim())?;
        let closed_form = match config.m_step {
            MStepKind::ClosedFormAuto => fp_gain(model, k).ok(),
            MStepKind::GradientAscent => None,
        };
        Ok(Self {
            model,
            y: y.clone(),
            k,
            prior: PriorTerm::Mixture(KernelMixture::propagated(model, ps_prev)),
            m_step: config.m_step,
            ascent: config.ascent,
            closed_form,
        })
    }

    /// Objective at step 0: measurement likelihood times the initial density.
    pub fn initial(model: &'a dyn StateSpaceModel, y0: &Vector, config: &EmConfig) -> Result<Self> {
        check_dim("observation", model.obs_dim(), y0.len())?;
        let prior = model.initial_density();
        let closed_form = match (config.m_step, model.linear_measurement(), prior.as_gaussian(), model.measurement_noise(0).as_gaussian()) {
            (MStepKind::ClosedFormAuto, Some(h), Some(p0), Some(v0)) => Some(FpGain {
                gain: linear_gaussian_gain(p0.covariance(), h, v0.covariance())?,
                process_cov: p0.covariance().clone(),
                measurement_cov: v0.covariance().clone(),
                observation: h.clone(),
                process_mean: Vector::zeros(model.state_dim()),
                measurement_mean: v0.mean(),
            }),
            _ => None,
        };
        Ok(Self {
            model,
            y: y0.clone(),
            k: 0,
            prior: PriorTerm::Initial(prior),
            m_step: config.m_step,
            ascent: config.ascent,
            closed_form,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// The deterministic starting point `f(x*_{k-1}) + E[w_{k-1}]`, or the
    /// initial mean at step 0.
    pub fn prediction(&self, previous_estimate: Option<&Vector>) -> Vector {
        match (&self.prior, previous_estimate) {
            (PriorTerm::Mixture(_), Some(prev)) => {
                self.model.f(self.k - 1, prev) + self.model.process_noise(self.k - 1).mean()
            }
            (PriorTerm::Mixture(mix), None) => {
                let uniform = vec![1.0 / mix.len() as f64; mix.len()];
                mix.weighted_center(&uniform)
            }
            (PriorTerm::Initial(p0), _) => p0.mean(),
        }
    }

    /// Density used to spread random restarts when none is configured.
    pub fn spread_density(&self) -> &'a dyn NoiseDensity {
        match &self.prior {
            PriorTerm::Mixture(mix) => mix.kernel(),
            PriorTerm::Initial(p0) => *p0,
        }
    }

    fn measurement_log_lik(&self, x: &Vector) -> Result<f64> {
        self.model
            .measurement_noise(self.k)
            .log_pdf_diff(&self.y, &self.model.g(self.k, x))
    }

    fn measurement_grad(&self, x: &Vector) -> Result<Vector> {
        let residual = &self.y - self.model.g(self.k, x);
        let grad_v = self.model.measurement_noise(self.k).grad_log_pdf(&residual)?;
        Ok(-(self.model.g_jacobian(self.k, x).transpose() * grad_v))
    }

    /// Normalized responsibilities `r_j(anchor)`; a single unit entry at step 0.
    pub fn responsibilities(&self, anchor: &Vector) -> Result<Vec<f64>> {
        match &self.prior {
            PriorTerm::Mixture(mix) => mix.responsibilities(anchor),
            PriorTerm::Initial(_) => Ok(vec![1.0]),
        }
    }

    fn q_with(&self, x: &Vector, resp: &[f64]) -> Result<f64> {
        let lv = self.measurement_log_lik(x)?;
        let prior = match &self.prior {
            PriorTerm::Mixture(mix) => mix.weighted_log_kernel(x, resp)?,
            PriorTerm::Initial(p0) => p0.log_pdf(x)?,
        };
        Ok(lv + prior)
    }

    fn grad_with(&self, x: &Vector, resp: &[f64]) -> Result<Vector> {
        let prior = match &self.prior {
            PriorTerm::Mixture(mix) => mix.weighted_grad(x, resp)?,
            PriorTerm::Initial(p0) => p0.grad_log_pdf(x)?,
        };
        Ok(self.measurement_grad(x)? + prior)
    }

    pub fn q_hat(&self, x: &Vector, anchor: &Vector) -> Result<f64> {
        self.q_with(x, &self.responsibilities(anchor)?)
    }

    pub fn q_hat_grad(&self, x: &Vector, anchor: &Vector) -> Result<Vector> {
        check_dim("state", self.model.state_dim(), x.len())?;
        self.grad_with(x, &self.responsibilities(anchor)?)
    }

    /// Log of the empirical filtered density at `x`, up to a constant.
    pub fn log_density(&self, x: &Vector) -> Result<f64> {
        let prior = match &self.prior {
            PriorTerm::Mixture(mix) => mix.log_density(x)?,
            PriorTerm::Initial(p0) => p0.log_pdf(x)?,
        };
        Ok(self.measurement_log_lik(x)? + prior)
    }

    /// Closed-form maximizer `m + B (y - E[v] - H m)` with `m` the
    /// responsibility-weighted prediction; `None` outside the linear
    /// measurement, Gaussian noise class.
    pub fn closed_form_m_step(&self, anchor: &Vector) -> Result<Option<Vector>> {
        let Some(gain) = &self.closed_form else {
            return Ok(None);
        };
        let center = match &self.prior {
            PriorTerm::Mixture(mix) => mix.weighted_center(&self.responsibilities(anchor)?),
            PriorTerm::Initial(p0) => p0.mean(),
        };
        Ok(Some(gain.apply(&center, &self.y)))
    }

    pub fn gradient_m_step(&self, anchor: &Vector) -> Result<MStepOutcome> {
        let resp = self.responsibilities(anchor)?;
        gradient_ascent(
            |x| self.q_with(x, &resp),
            |x| self.grad_with(x, &resp),
            anchor,
            &self.ascent,
        )
    }
}

impl EmObjective for FilterObjective<'_> {
    fn surrogate(&self, x: &Vector, anchor: &Vector) -> Result<f64> {
        self.q_hat(x, anchor)
    }

    fn m_step(&self, anchor: &Vector) -> Result<MStepOutcome> {
        if self.m_step == MStepKind::ClosedFormAuto {
            if let Some(x) = self.closed_form_m_step(anchor)? {
                return Ok(MStepOutcome::closed_form(x));
            }
        }
        self.gradient_m_step(anchor)
    }

    fn log_density(&self, x: &Vector) -> Result<f64> {
        FilterObjective::log_density(self, x)
    }

    fn step(&self) -> usize {
        self.k
    }
}

/// Normalized responsibilities `λ_j w_j / sum_l λ_l w_l` with
/// `λ_j = W_{k-1}(x^i - f(p_j))`.
pub fn lambda_weights(
    model: &dyn StateSpaceModel,
    ps_prev: &ParticleSet,
    zeta_i: &Vector,
    k: usize,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Config("responsibilities need a previous step".into()));
    }
    ps_prev.require(k - 1, Conditioning::Filtered)?;
    KernelMixture::propagated(model, ps_prev).responsibilities(zeta_i)
}

pub fn q_hat(
    model: &dyn StateSpaceModel,
    ps_prev: &ParticleSet,
    y: &Vector,
    zeta: &Vector,
    zeta_i: &Vector,
    k: usize,
) -> Result<f64> {
    FilterObjective::new(model, ps_prev, y, k, &EmConfig::default())?.q_hat(zeta, zeta_i)
}

pub fn q_hat_grad(
    model: &dyn StateSpaceModel,
    ps_prev: &ParticleSet,
    y: &Vector,
    zeta: &Vector,
    zeta_i: &Vector,
    k: usize,
) -> Result<Vector> {
    FilterObjective::new(model, ps_prev, y, k, &EmConfig::default())?.q_hat_grad(zeta, zeta_i)
}

pub fn m_step(
    model: &dyn StateSpaceModel,
    ps_prev: &ParticleSet,
    y: &Vector,
    zeta_i: &Vector,
    k: usize,
    config: &EmConfig,
) -> Result<MStepOutcome> {
    FilterObjective::new(model, ps_prev, y, k, config)?.m_step(zeta_i)
}

pub fn empirical_filtered_log_density(
    model: &dyn StateSpaceModel,
    ps_prev: &ParticleSet,
    y: &Vector,
    zeta: &Vector,
    k: usize,
) -> Result<f64> {
    FilterObjective::new(model, ps_prev, y, k, &EmConfig::default())?.log_density(zeta)
}

/// One EMSF time step with the configured restarts. The winner is the final
/// iterate with the highest empirical filtered log-density.
pub fn emsf_step(
    model: &dyn StateSpaceModel,
    ps_prev: &ParticleSet,
    y: &Vector,
    zeta_star_prev: &Vector,
    k: usize,
    config: &EmConfig,
    rng: &mut dyn RngCore,
) -> Result<EmEstimate> {
    config.validate(model.state_dim())?;
    let objective = FilterObjective::new(model, ps_prev, y, k, config)?;
    let prediction = objective.prediction(Some(zeta_star_prev));
    let starts = starting_points(config, &prediction, objective.spread_density(), rng);
    multi_start(&objective, &starts, config.rel_tol, config.max_iters)
}

/// The step-0 estimate: mode of `V_0(y_0 - g(x)) p_0(x)`.
pub fn emsf_initial(
    model: &dyn StateSpaceModel,
    y0: &Vector,
    config: &EmConfig,
    rng: &mut dyn RngCore,
) -> Result<EmEstimate> {
    config.validate(model.state_dim())?;
    let objective = FilterObjective::initial(model, y0, config)?;
    let prediction = objective.prediction(None);
    let starts = starting_points(config, &prediction, objective.spread_density(), rng);
    multi_start(&objective, &starts, config.rel_tol, config.max_iters)
}
