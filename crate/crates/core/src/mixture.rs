//! Kernel mixtures `sum_j w_j K(x - c_j)` built from a weighted particle set
//! pushed through the dynamics. This is the smooth prior term shared by the
//! filter, predictor and smoother objectives.

use crate::densities::NoiseDensity;
use crate::error::{Error, Result};
use crate::model::StateSpaceModel;
use crate::par;
use crate::particle_filter::ParticleSet;
use crate::Vector;

pub struct KernelMixture<'a> {
    centers: Vec<Vector>,
    log_weights: Vec<f64>,
    kernel: &'a dyn NoiseDensity,
    /// Step whose state the mixture describes.
    step: usize,
}

impl<'a> KernelMixture<'a> {
    /// The mixture `sum_j w_j W_{s}(x - f(s, p_j))` describing step `s + 1`,
    /// where `s` is the step of `ps`.
    pub fn propagated(model: &'a dyn StateSpaceModel, ps: &ParticleSet) -> Self {
        let s = ps.step();
        let centers = par::map_range(ps.len(), |j| model.f(s, &ps.particles()[j]));
        Self {
            centers,
            log_weights: ps.log_weights(),
            kernel: model.process_noise(s),
            step: s + 1,
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[Vector] {
        &self.centers
    }

    pub fn kernel(&self) -> &'a dyn NoiseDensity {
        self.kernel
    }

    /// `log w_j + log K(x - c_j)` for every component.
    pub fn component_log_terms(&self, x: &Vector) -> Result<Vec<f64>> {
        par::try_map_range(self.len(), |j| {
            let lw = self.log_weights[j];
            if lw == f64::NEG_INFINITY {
                return Ok(f64::NEG_INFINITY);
            }
            Ok(lw + self.kernel.log_pdf_diff(x, &self.centers[j])?)
        })
    }

    pub fn log_density(&self, x: &Vector) -> Result<f64> {
        Ok(par::log_sum_exp(&self.component_log_terms(x)?))
    }

    /// Posterior component probabilities at `x`, normalized to sum to one.
    pub fn responsibilities(&self, x: &Vector) -> Result<Vec<f64>> {
        par::normalize_log_weights(&self.component_log_terms(x)?)
            .ok_or(Error::DegenerateResponsibilities { step: self.step })
    }

    /// `sum_j r_j log K(x - c_j)`, skipping components with zero
    /// responsibility.
    pub fn weighted_log_kernel(&self, x: &Vector, resp: &[f64]) -> Result<f64> {
        let terms = par::try_map_range(self.len(), |j| {
            if resp[j] == 0.0 {
                Ok(0.0)
            } else {
                Ok(resp[j] * self.kernel.log_pdf_diff(x, &self.centers[j])?)
            }
        })?;
        Ok(terms.iter().sum())
    }

    /// `sum_j r_j grad log K(x - c_j)`.
    pub fn weighted_grad(&self, x: &Vector, resp: &[f64]) -> Result<Vector> {
        let terms = par::try_map_range(self.len(), |j| {
            if resp[j] == 0.0 {
                Ok(None)
            } else {
                Ok(Some(self.kernel.grad_log_pdf(&(x - &self.centers[j]))? * resp[j]))
            }
        })?;
        let mut acc = Vector::zeros(x.len());
        for t in terms.into_iter().flatten() {
            acc += t;
        }
        Ok(acc)
    }

    /// `sum_j r_j (c_j + E[kernel])`: the maximizer of
    /// [`weighted_log_kernel`](Self::weighted_log_kernel) for a Gaussian
    /// kernel.
    pub fn weighted_center(&self, resp: &[f64]) -> Vector {
        let mut acc = Vector::zeros(self.kernel.dim());
        for (c, r) in self.centers.iter().zip(resp) {
            if *r != 0.0 {
                acc.axpy(*r, c, 1.0);
            }
        }
        acc + self.kernel.mean()
    }
}
