//! EM state smoother: the mode of `p(x_k | y_0..y_n)` for `n > k + 1`.
//!
//! Smoothed weights come from a forward-filtering backward-smoothing (FFBS)
//! reweighting pass over the stored weighted filtered sets. The smoother
//! objective combines three particle approximations:
//!
//! ```text
//! log V_k(y_k - g(x))
//!   + log sum_j w^j_{k-1|k-1} W_{k-1}(x - f(p^j_{k-1|k-1}))
//!   + log sum_t (w^t_{k+1|n} / d_t) W_k(q^t_{k+1|n} - f(x))
//! d_t = sum_j w^j_{k|k} W_k(q^t_{k+1|n} - f(p^j_{k|k}))
//! ```
//!
//! EM minorizes only the last term; the M-step is gradient ascent because the
//! log-mixture term has no closed-form maximizer. At `k = 0` the second term
//! is the initial density.

use rand::RngCore;

use crate::densities::NoiseDensity;
use crate::em::{gradient_ascent, multi_start, run_em, starting_points, AscentConfig, EmConfig, EmEstimate, EmObjective, EmTrace, MStepOutcome};
use crate::error::{check_dim, Error, Result};
use crate::mixture::KernelMixture;
use crate::model::StateSpaceModel;
use crate::par;
use crate::particle_filter::{Conditioning, ParticleSet};
use crate::Vector;

fn support_mismatch(step: usize, particle: usize) -> Error {
    Error::SupportMismatch { step, particle }
}

/// `log d_t` for every particle `t` of `next`, where `current` is the
/// weighted filtered set at `k` and `next` describes `k + 1`.
fn log_denominators(model: &dyn StateSpaceModel, current: &ParticleSet, next: &ParticleSet) -> Result<Vec<f64>> {
    let mixture = KernelMixture::propagated(model, current);
    let k = current.step();
    let next_weights = next.weights();
    par::try_map_range(next.len(), |t| {
        let ld = mixture.log_density(&next.particles()[t])?;
        if ld == f64::NEG_INFINITY && next_weights[t] > 0.0 {
            return Err(support_mismatch(k + 1, t));
        }
        Ok(ld)
    })
}

/// The FFBS denominators `d_t = sum_j w^j_{k|k} W_k(q^t - f(p^j_{k|k}))`.
/// Cost is quadratic in the particle count.
pub fn smoothing_denominators(model: &dyn StateSpaceModel, inputs: &SmootherInputs) -> Result<Vec<f64>> {
    Ok(log_denominators(model, &inputs.current, &inputs.next_smoothed)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// One backward FFBS step: smoothed weights at `k` from the filtered set at
/// `k` and the smoothed set at `k + 1`.
fn backward_step(model: &dyn StateSpaceModel, filtered: &ParticleSet, next_smoothed: &ParticleSet) -> Result<Vec<f64>> {
    let k = filtered.step();
    let log_d = log_denominators(model, filtered, next_smoothed)?;
    let kernel = model.process_noise(k);
    let next_lw = next_smoothed.log_weights();
    // a_t = log w^t_{k+1|n} - log d_t, skipping particles with no mass.
    let a: Vec<f64> = next_lw
        .iter()
        .zip(&log_d)
        .map(|(lw, ld)| if *lw == f64::NEG_INFINITY { f64::NEG_INFINITY } else { lw - ld })
        .collect();
    let filtered_lw = filtered.log_weights();
    let log_w = par::try_map_range(filtered.len(), |j| {
        if filtered_lw[j] == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        let center = model.f(k, &filtered.particles()[j]);
        let mut terms = Vec::with_capacity(next_smoothed.len());
        for (t, q) in next_smoothed.particles().iter().enumerate() {
            if a[t] == f64::NEG_INFINITY {
                continue;
            }
            terms.push(a[t] + kernel.log_pdf_diff(q, &center)?);
        }
        Ok(filtered_lw[j] + par::log_sum_exp(&terms))
    })?;
    par::normalize_log_weights(&log_w).ok_or(support_mismatch(k, 0))
}

/// Smoothed weights `w_{k|n}` for `k = 0..=n`, attached to the particles of
/// the weighted filtered sets (which must be indexed by step, pre-resampling).
pub fn ffbs_smoothed_weights(
    model: &dyn StateSpaceModel,
    filtered_sets: &[ParticleSet],
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    Ok(ffbs_smoothed_sets(model, filtered_sets, n)?
        .into_iter()
        .map(|ps| ps.weights().to_vec())
        .collect())
}

/// Like [`ffbs_smoothed_weights`] but returns full particle sets labelled as
/// smoothed given `n`.
pub fn ffbs_smoothed_sets(model: &dyn StateSpaceModel, filtered_sets: &[ParticleSet], n: usize) -> Result<Vec<ParticleSet>> {
    ffbs_smoothed_window(model, filtered_sets, 0, n)
}

/// The backward pass stopped at `from`: smoothed sets given `n` for steps
/// `from..=n` (element `i` describes step `from + i`). Fixed-lag smoothing
/// uses this to avoid sweeping back to step 0 for every `n`.
pub fn ffbs_smoothed_window(
    model: &dyn StateSpaceModel,
    filtered_sets: &[ParticleSet],
    from: usize,
    n: usize,
) -> Result<Vec<ParticleSet>> {
    if n >= filtered_sets.len() || from > n {
        return Err(Error::InvalidSmoothingRange { k: from, n });
    }
    let count = filtered_sets[n].len();
    for (k, ps) in filtered_sets.iter().enumerate().take(n + 1).skip(from) {
        ps.require(k, Conditioning::Filtered)?;
        if ps.len() != count {
            return Err(Error::ParticleCountMismatch(count, ps.len()));
        }
    }
    let smoothed_label = Conditioning::Smoothed { given: n };
    let mut out = vec![filtered_sets[n].relabeled(smoothed_label)];
    for k in (from..n).rev() {
        let weights = backward_step(model, &filtered_sets[k], out.last().expect("non-empty"))?;
        out.push(filtered_sets[k].reweighted(weights, smoothed_label)?);
    }
    out.reverse();
    Ok(out)
}

/// The particle approximations the smoother objective at step `k` needs.
#[derive(Debug, Clone)]
pub struct SmootherInputs {
    /// Weighted filtered set at `k - 1`; `None` at `k = 0`.
    pub prior: Option<ParticleSet>,
    /// Weighted filtered set at `k`.
    pub current: ParticleSet,
    /// Smoothed set at `k + 1` given `n`.
    pub next_smoothed: ParticleSet,
    pub y: Vector,
    pub n: usize,
}

impl SmootherInputs {
    pub fn new(
        prior: Option<ParticleSet>,
        current: ParticleSet,
        next_smoothed: ParticleSet,
        y: Vector,
        n: usize,
    ) -> Result<Self> {
        let k = current.step();
        if n <= k + 1 {
            return Err(Error::InvalidSmoothingRange { k, n });
        }
        current.require(k, Conditioning::Filtered)?;
        next_smoothed.require(k + 1, Conditioning::Smoothed { given: n })?;
        match (&prior, k) {
            (None, 0) => {}
            (Some(p), k) if k > 0 => {
                p.require(k - 1, Conditioning::Filtered)?;
                if p.len() != current.len() {
                    return Err(Error::ParticleCountMismatch(current.len(), p.len()));
                }
            }
            _ => return Err(Error::Config(format!("a prior filtered set is required exactly when k > 0 (k = {k})"))),
        }
        if next_smoothed.len() != current.len() {
            return Err(Error::ParticleCountMismatch(current.len(), next_smoothed.len()));
        }
        Ok(Self {
            prior,
            current,
            next_smoothed,
            y,
            n,
        })
    }

    /// Assembles the inputs for step `k` from a forward pass (weighted
    /// filtered sets by step), the FFBS output and the observations.
    pub fn from_sets(
        filtered_sets: &[ParticleSet],
        smoothed_sets: &[ParticleSet],
        observations: &[Vector],
        k: usize,
        n: usize,
    ) -> Result<Self> {
        if n <= k + 1 || n >= filtered_sets.len() || n >= smoothed_sets.len() || k >= observations.len() {
            return Err(Error::InvalidSmoothingRange { k, n });
        }
        let prior = (k > 0).then(|| filtered_sets[k - 1].clone());
        Self::new(prior, filtered_sets[k].clone(), smoothed_sets[k + 1].clone(), observations[k].clone(), n)
    }

    pub fn k(&self) -> usize {
        self.current.step()
    }
}

enum PriorTerm<'a> {
    Mixture(KernelMixture<'a>),
    Initial(&'a dyn NoiseDensity),
}

/// The smoother objective at one step, with the denominators precomputed.
pub struct SmootherObjective<'a> {
    model: &'a dyn StateSpaceModel,
    k: usize,
    y: Vector,
    prior: PriorTerm<'a>,
    future_points: Vec<Vector>,
    /// `log w^t_{k+1|n} - log d_t`.
    future_log_weights: Vec<f64>,
    ascent: AscentConfig,
}

impl<'a> SmootherObjective<'a> {
    pub fn new(model: &'a dyn StateSpaceModel, inputs: &SmootherInputs, config: &EmConfig) -> Result<Self> {
        let k = inputs.k();
        check_dim("observation", model.obs_dim(), inputs.y.len())?;
        check_dim("particle dimension", model.state_dim(), inputs.current.dim())?;
        let log_d = log_denominators(model, &inputs.current, &inputs.next_smoothed)?;
        let future_log_weights = inputs
            .next_smoothed
            .log_weights()
            .iter()
            .zip(&log_d)
            .map(|(lw, ld)| if *lw == f64::NEG_INFINITY { f64::NEG_INFINITY } else { lw - ld })
            .collect();
        let prior = match &inputs.prior {
            Some(p) => PriorTerm::Mixture(KernelMixture::propagated(model, p)),
            None => PriorTerm::Initial(model.initial_density()),
        };
        Ok(Self {
            model,
            k,
            y: inputs.y.clone(),
            prior,
            future_points: inputs.next_smoothed.particles().to_vec(),
            future_log_weights,
            ascent: config.ascent,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Spread density for random restarts.
    pub fn spread_density(&self) -> &'a dyn NoiseDensity {
        match &self.prior {
            PriorTerm::Mixture(m) => m.kernel(),
            PriorTerm::Initial(p0) => *p0,
        }
    }

    fn future_log_terms(&self, x: &Vector) -> Result<Vec<f64>> {
        let fx = self.model.f(self.k, x);
        let kernel = self.model.process_noise(self.k);
        par::try_map_range(self.future_points.len(), |t| {
            let a = self.future_log_weights[t];
            if a == f64::NEG_INFINITY {
                return Ok(f64::NEG_INFINITY);
            }
            Ok(a + kernel.log_pdf_diff(&self.future_points[t], &fx)?)
        })
    }

    /// Normalized weights of the future term at `anchor`.
    pub fn responsibilities(&self, anchor: &Vector) -> Result<Vec<f64>> {
        par::normalize_log_weights(&self.future_log_terms(anchor)?)
            .ok_or(Error::DegenerateResponsibilities { step: self.k })
    }

    fn fixed_part(&self, x: &Vector) -> Result<f64> {
        let lv = self
            .model
            .measurement_noise(self.k)
            .log_pdf_diff(&self.y, &self.model.g(self.k, x))?;
        let prior = match &self.prior {
            PriorTerm::Mixture(m) => m.log_density(x)?,
            PriorTerm::Initial(p0) => p0.log_pdf(x)?,
        };
        Ok(lv + prior)
    }

    fn fixed_part_grad(&self, x: &Vector) -> Result<Vector> {
        let residual = &self.y - self.model.g(self.k, x);
        let gv = self.model.measurement_noise(self.k).grad_log_pdf(&residual)?;
        let lv_grad = -(self.model.g_jacobian(self.k, x).transpose() * gv);
        let prior = match &self.prior {
            PriorTerm::Mixture(m) => {
                let resp = m.responsibilities(x)?;
                m.weighted_grad(x, &resp)?
            }
            PriorTerm::Initial(p0) => p0.grad_log_pdf(x)?,
        };
        Ok(lv_grad + prior)
    }

    fn future_with(&self, x: &Vector, resp: &[f64]) -> Result<f64> {
        let fx = self.model.f(self.k, x);
        let kernel = self.model.process_noise(self.k);
        let terms = par::try_map_range(self.future_points.len(), |t| {
            if resp[t] == 0.0 {
                Ok(0.0)
            } else {
                Ok(resp[t] * kernel.log_pdf_diff(&self.future_points[t], &fx)?)
            }
        })?;
        Ok(terms.iter().sum())
    }

    fn future_grad_with(&self, x: &Vector, resp: &[f64]) -> Result<Vector> {
        let fx = self.model.f(self.k, x);
        let kernel = self.model.process_noise(self.k);
        let terms = par::try_map_range(self.future_points.len(), |t| {
            if resp[t] == 0.0 {
                Ok(None)
            } else {
                Ok(Some(kernel.grad_log_pdf(&(&self.future_points[t] - &fx))? * resp[t]))
            }
        })?;
        let mut acc = Vector::zeros(fx.len());
        for t in terms.into_iter().flatten() {
            acc += t;
        }
        // d/dx log W(q - f(x)) = -J_f(x)^T grad log W(q - f(x))
        Ok(-(self.model.f_jacobian(self.k, x).transpose() * acc))
    }

    pub fn q_hat(&self, x: &Vector, anchor: &Vector) -> Result<f64> {
        Ok(self.fixed_part(x)? + self.future_with(x, &self.responsibilities(anchor)?)?)
    }

    pub fn q_hat_grad(&self, x: &Vector, anchor: &Vector) -> Result<Vector> {
        check_dim("state", self.model.state_dim(), x.len())?;
        Ok(self.fixed_part_grad(x)? + self.future_grad_with(x, &self.responsibilities(anchor)?)?)
    }

    /// The objective the iterates climb: the surrogate's future term replaced
    /// by its log-sum.
    pub fn log_density(&self, x: &Vector) -> Result<f64> {
        Ok(self.fixed_part(x)? + par::log_sum_exp(&self.future_log_terms(x)?))
    }
}

impl EmObjective for SmootherObjective<'_> {
    fn surrogate(&self, x: &Vector, anchor: &Vector) -> Result<f64> {
        self.q_hat(x, anchor)
    }

    fn m_step(&self, anchor: &Vector) -> Result<MStepOutcome> {
        let resp = self.responsibilities(anchor)?;
        gradient_ascent(
            |x| Ok(self.fixed_part(x)? + self.future_with(x, &resp)?),
            |x| Ok(self.fixed_part_grad(x)? + self.future_grad_with(x, &resp)?),
            anchor,
            &self.ascent,
        )
    }

    fn log_density(&self, x: &Vector) -> Result<f64> {
        SmootherObjective::log_density(self, x)
    }

    fn step(&self) -> usize {
        self.k
    }
}

pub fn q_hat_smooth(model: &dyn StateSpaceModel, inputs: &SmootherInputs, zeta: &Vector, zeta_i: &Vector) -> Result<f64> {
    SmootherObjective::new(model, inputs, &EmConfig::default())?.q_hat(zeta, zeta_i)
}

pub fn q_hat_smooth_grad(
    model: &dyn StateSpaceModel,
    inputs: &SmootherInputs,
    zeta: &Vector,
    zeta_i: &Vector,
) -> Result<Vector> {
    SmootherObjective::new(model, inputs, &EmConfig::default())?.q_hat_grad(zeta, zeta_i)
}

/// Single-start EMSS from `zeta0` (typically the EM filter estimate at `k`).
pub fn emss_step(
    model: &dyn StateSpaceModel,
    inputs: &SmootherInputs,
    zeta0: &Vector,
    config: &EmConfig,
) -> Result<(Vector, EmTrace)> {
    config.validate(model.state_dim())?;
    let objective = SmootherObjective::new(model, inputs, config)?;
    let trace = run_em(&objective, zeta0, config.rel_tol, config.max_iters, 0)?;
    Ok((trace.last().clone(), trace))
}

/// Multi-start EMSS; restart 0 starts at `zeta0` under the default policy.
pub fn emss_estimate(
    model: &dyn StateSpaceModel,
    inputs: &SmootherInputs,
    zeta0: &Vector,
    config: &EmConfig,
    rng: &mut dyn RngCore,
) -> Result<EmEstimate> {
    config.validate(model.state_dim())?;
    let objective = SmootherObjective::new(model, inputs, config)?;
    let starts = starting_points(config, zeta0, objective.spread_density(), rng);
    multi_start(&objective, &starts, config.rel_tol, config.max_iters)
}
