//! Fixed-point state filter. For a linear measurement `g(x) = H x` with
//! Gaussian process and measurement noise, the EM filter's M-step has the
//! closed form
//!
//! ```text
//! x^{i+1} = m + B_k (y_k - E[v_k] - H m),   B_k = S_{k-1} H^T (H S_{k-1} H^T + R_k)^{-1}
//! ```
//!
//! where `m = E[w_{k-1}] + sum_j r_j(x^i) f(p_j)`. Iterating it needs no
//! derivatives at all.

use crate::densities::NoiseDensity as _;
use crate::em::{run_em, EmConfig, EmTrace, MStepKind};
use crate::em_filter::FilterObjective;
use crate::error::{Error, Result};
use crate::model::StateSpaceModel;
use crate::particle_filter::ParticleSet;
use crate::{Matrix, Vector};

/// Gain of the fixed-point iteration together with the matrices it was
/// computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct FpGain {
    pub gain: Matrix,
    pub process_cov: Matrix,
    pub measurement_cov: Matrix,
    pub observation: Matrix,
    pub process_mean: Vector,
    pub measurement_mean: Vector,
}

impl FpGain {
    /// `center + B (y - E[v] - H center)`.
    pub fn apply(&self, center: &Vector, y: &Vector) -> Vector {
        let innovation = y - &self.measurement_mean - &self.observation * center;
        center + &self.gain * innovation
    }
}

/// `S H^T (H S H^T + R)^{-1}`, with the inverse applied through a Cholesky
/// solve.
pub fn linear_gaussian_gain(process_cov: &Matrix, observation: &Matrix, measurement_cov: &Matrix) -> Result<Matrix> {
    let sht = process_cov * observation.transpose();
    let innovation = observation * &sht + measurement_cov;
    let innovation = (&innovation + innovation.transpose()) * 0.5;
    let chol = innovation
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("innovation covariance"))?;
    // B (H S H^T + R) = S H^T  <=>  (H S H^T + R) B^T = H S
    Ok(chol.solve(&sht.transpose()).transpose())
}

/// The gain at step `k >= 1`. Fails unless the measurement is linear and both
/// `W_{k-1}` and `V_k` are Gaussian.
pub fn fp_gain(model: &dyn StateSpaceModel, k: usize) -> Result<FpGain> {
    if k == 0 {
        return Err(Error::Config("the fixed-point gain needs a previous step".into()));
    }
    let unsupported = || Error::UnsupportedModel(format!("{} has no closed-form M-step", model.name()));
    let h = model.linear_measurement().ok_or_else(unsupported)?;
    let w = model.process_noise(k - 1).as_gaussian().ok_or_else(unsupported)?;
    let v = model.measurement_noise(k).as_gaussian().ok_or_else(unsupported)?;
    Ok(FpGain {
        gain: linear_gaussian_gain(w.covariance(), h, v.covariance())?,
        process_cov: w.covariance().clone(),
        measurement_cov: v.covariance().clone(),
        observation: h.clone(),
        process_mean: w.mean(),
        measurement_mean: v.mean(),
    })
}

fn closed_form_objective<'a>(
    model: &'a dyn StateSpaceModel,
    ps_prev: &ParticleSet,
    y: &Vector,
    k: usize,
    config: &EmConfig,
) -> Result<FilterObjective<'a>> {
    fp_gain(model, k)?;
    let config = EmConfig {
        m_step: MStepKind::ClosedFormAuto,
        ..config.clone()
    };
    FilterObjective::new(model, ps_prev, y, k, &config)
}

/// One fixed-point update from `zeta_i`.
pub fn fpsf_iterate(
    model: &dyn StateSpaceModel,
    ps_prev: &ParticleSet,
    y: &Vector,
    zeta_i: &Vector,
    k: usize,
) -> Result<Vector> {
    let objective = closed_form_objective(model, ps_prev, y, k, &EmConfig::default())?;
    objective
        .closed_form_m_step(zeta_i)?
        .ok_or_else(|| Error::UnsupportedModel(model.name().to_string()))
}

/// Iterates [`fpsf_iterate`] from `zeta0` until the relative-change test holds
/// or `config.max_iters` is reached (then the last iterate is returned with
/// `converged == false`).
pub fn fpsf_step(
    model: &dyn StateSpaceModel,
    ps_prev: &ParticleSet,
    y: &Vector,
    zeta0: &Vector,
    k: usize,
    config: &EmConfig,
) -> Result<(Vector, EmTrace)> {
    config.validate(model.state_dim())?;
    let objective = closed_form_objective(model, ps_prev, y, k, config)?;
    let trace = run_em(&objective, zeta0, config.rel_tol, config.max_iters, 0)?;
    Ok((trace.last().clone(), trace))
}
