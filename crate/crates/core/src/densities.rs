//! Noise densities used for process noise, measurement noise and initial
//! state distributions.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::{Matrix, Vector};

/// A continuously differentiable probability density on `R^d`.
///
/// Implementations are immutable after construction. Sampling takes an
/// explicit random stream.
pub trait NoiseDensity: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// Log of the density at `x`; `-inf` off the support.
    fn log_pdf(&self, x: &Vector) -> Result<f64>;

    /// Gradient of [`log_pdf`](Self::log_pdf) with respect to `x`.
    fn grad_log_pdf(&self, x: &Vector) -> Result<Vector>;

    fn sample(&self, rng: &mut dyn RngCore) -> Vector;

    fn mean(&self) -> Vector;

    /// `log_pdf(a - b)`. Implementations may override this to avoid the
    /// temporary difference vector.
    fn log_pdf_diff(&self, a: &Vector, b: &Vector) -> Result<f64> {
        check_dim("log_pdf_diff", a.len(), b.len())?;
        self.log_pdf(&(a - b))
    }

    fn as_gaussian(&self) -> Option<&GaussianDensity> {
        None
    }
}

/// Multivariate normal density with a cached Cholesky factor and precision
/// matrix.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    mean: Vector,
    covariance: Matrix,
    chol_lower: Matrix,
    precision: Matrix,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(mean: Vector, covariance: Matrix) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Config("density dimension must be positive".into()));
        }
        check_dim("covariance rows", d, covariance.nrows())?;
        check_dim("covariance columns", d, covariance.ncols())?;
        let scale = covariance.amax().max(f64::MIN_POSITIVE);
        for i in 0..d {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-12 * scale.max(1.0) {
                    return Err(Error::NotSymmetric("covariance"));
                }
            }
        }
        let chol = covariance
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("covariance"))?;
        let chol_lower = chol.l();
        let log_det: f64 = 2.0 * chol_lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        let log_norm = -0.5 * (d as f64 * (2.0 * PI).ln() + log_det);
        Ok(Self {
            mean,
            covariance,
            chol_lower,
            precision,
            log_norm,
        })
    }

    /// Scalar normal with the given mean and variance.
    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::new(Vector::from_element(1, mean), Matrix::from_element(1, 1, variance))
    }

    pub fn zero_mean(covariance: Matrix) -> Result<Self> {
        Self::new(Vector::zeros(covariance.nrows()), covariance)
    }

    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(Vector::zeros(dim), Matrix::identity(dim, dim))
    }

    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }

    pub fn precision(&self) -> &Matrix {
        &self.precision
    }

    pub fn cholesky_lower(&self) -> &Matrix {
        &self.chol_lower
    }

    /// Log of the normalizing constant, i.e. the log-density at the mean.
    pub fn log_normalizer(&self) -> f64 {
        self.log_norm
    }

    /// Squared Mahalanobis distance of `a - b` from the mean, without
    /// allocating.
    fn mahalanobis_diff(&self, a: &Vector, b: &Vector) -> f64 {
        let d = self.mean.len();
        let mut acc = 0.0;
        for i in 0..d {
            let ri = a[i] - b[i] - self.mean[i];
            let mut row = 0.0;
            for j in 0..d {
                row += self.precision[(i, j)] * (a[j] - b[j] - self.mean[j]);
            }
            acc += ri * row;
        }
        acc
    }
}

impl NoiseDensity for GaussianDensity {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_pdf(&self, x: &Vector) -> Result<f64> {
        check_dim("log_pdf", self.dim(), x.len())?;
        let centered = x - &self.mean;
        let quad = centered.dot(&(&self.precision * &centered));
        Ok(self.log_norm - 0.5 * quad)
    }

    fn grad_log_pdf(&self, x: &Vector) -> Result<Vector> {
        check_dim("grad_log_pdf", self.dim(), x.len())?;
        Ok(-(&self.precision * (x - &self.mean)))
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vector {
        let z = Vector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        &self.mean + &self.chol_lower * z
    }

    fn mean(&self) -> Vector {
        self.mean.clone()
    }

    fn log_pdf_diff(&self, a: &Vector, b: &Vector) -> Result<f64> {
        check_dim("log_pdf_diff", self.dim(), a.len())?;
        check_dim("log_pdf_diff", self.dim(), b.len())?;
        Ok(self.log_norm - 0.5 * self.mahalanobis_diff(a, b))
    }

    fn as_gaussian(&self) -> Option<&GaussianDensity> {
        Some(self)
    }
}

/// Uniform density on an axis-aligned box `[lower, upper]`.
///
/// The log-density is constant inside the box and `-inf` outside, so its
/// gradient is zero on the interior.
#[derive(Debug, Clone)]
pub struct UniformBox {
    lower: Vector,
    upper: Vector,
    log_density: f64,
}

impl UniformBox {
    pub fn new(lower: Vector, upper: Vector) -> Result<Self> {
        check_dim("uniform box bounds", lower.len(), upper.len())?;
        if lower.is_empty() {
            return Err(Error::Config("density dimension must be positive".into()));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(u > l)) {
            return Err(Error::Config("uniform box needs lower < upper in every component".into()));
        }
        let log_volume: f64 = lower.iter().zip(upper.iter()).map(|(l, u)| (u - l).ln()).sum();
        Ok(Self {
            lower,
            upper,
            log_density: -log_volume,
        })
    }

    /// The cube `[lower, upper]^dim`.
    pub fn cube(dim: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(Vector::from_element(dim, lower), Vector::from_element(dim, upper))
    }

    fn contains(&self, x: &Vector) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }
}

impl NoiseDensity for UniformBox {
    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn log_pdf(&self, x: &Vector) -> Result<f64> {
        check_dim("log_pdf", self.dim(), x.len())?;
        Ok(if self.contains(x) {
            self.log_density
        } else {
            f64::NEG_INFINITY
        })
    }

    fn grad_log_pdf(&self, x: &Vector) -> Result<Vector> {
        check_dim("grad_log_pdf", self.dim(), x.len())?;
        Ok(Vector::zeros(self.dim()))
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vector {
        Vector::from_fn(self.dim(), |i, _| {
            let u: f64 = rng.random();
            self.lower[i] + u * (self.upper[i] - self.lower[i])
        })
    }

    fn mean(&self) -> Vector {
        (&self.lower + &self.upper) * 0.5
    }
}
