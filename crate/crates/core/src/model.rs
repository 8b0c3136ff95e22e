//! State-space models `x_{k+1} = f_k(x_k) + w_k`, `y_k = g_k(x_k) + v_k`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::RngCore;

use crate::densities::{GaussianDensity, NoiseDensity};
use crate::error::{check_dim, Error, Result};
use crate::{Matrix, Vector};

/// A discrete-time system affine in its process and measurement noises.
///
/// `f(k, x)` maps the state at step `k` to the noise-free state at `k + 1`;
/// `process_noise(k)` is the density of `w_k`. `g(k, x)` and
/// `measurement_noise(k)` describe `y_k`.
pub trait StateSpaceModel: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;

    fn f(&self, k: usize, x: &Vector) -> Vector;
    fn f_jacobian(&self, k: usize, x: &Vector) -> Matrix;
    fn g(&self, k: usize, x: &Vector) -> Vector;
    fn g_jacobian(&self, k: usize, x: &Vector) -> Matrix;

    fn process_noise(&self, k: usize) -> &dyn NoiseDensity;
    fn measurement_noise(&self, k: usize) -> &dyn NoiseDensity;
    fn initial_density(&self) -> &dyn NoiseDensity;

    /// `Some(H)` when `g(k, x) = H x` exactly.
    fn linear_measurement(&self) -> Option<&Matrix> {
        None
    }

    fn as_linear_gaussian(&self) -> Option<&LinearGaussianModel> {
        None
    }
}

/// Linear dynamics and measurement with Gaussian noises and prior.
#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    name: String,
    transition: Matrix,
    observation: Matrix,
    process: GaussianDensity,
    measurement: GaussianDensity,
    initial: GaussianDensity,
}

impl LinearGaussianModel {
    pub fn new(
        name: impl Into<String>,
        transition: Matrix,
        observation: Matrix,
        process_cov: Matrix,
        measurement_cov: Matrix,
        initial_mean: Vector,
        initial_cov: Matrix,
    ) -> Result<Self> {
        let n = transition.nrows();
        check_dim("transition columns", n, transition.ncols())?;
        check_dim("observation columns", n, observation.ncols())?;
        check_dim("initial mean", n, initial_mean.len())?;
        check_dim("measurement covariance", observation.nrows(), measurement_cov.nrows())?;
        let process = GaussianDensity::zero_mean(process_cov)?;
        check_dim("process covariance", n, process.dim())?;
        Ok(Self {
            name: name.into(),
            transition,
            observation,
            process,
            measurement: GaussianDensity::zero_mean(measurement_cov)?,
            initial: GaussianDensity::new(initial_mean, initial_cov)?,
        })
    }

    pub fn transition(&self) -> &Matrix {
        &self.transition
    }

    pub fn observation(&self) -> &Matrix {
        &self.observation
    }

    pub fn process_cov(&self) -> &Matrix {
        self.process.covariance()
    }

    pub fn measurement_cov(&self) -> &Matrix {
        self.measurement.covariance()
    }

    pub fn initial(&self) -> &GaussianDensity {
        &self.initial
    }
}

impl StateSpaceModel for LinearGaussianModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn state_dim(&self) -> usize {
        self.transition.nrows()
    }

    fn obs_dim(&self) -> usize {
        self.observation.nrows()
    }

    fn f(&self, _k: usize, x: &Vector) -> Vector {
        &self.transition * x
    }

    fn f_jacobian(&self, _k: usize, _x: &Vector) -> Matrix {
        self.transition.clone()
    }

    fn g(&self, _k: usize, x: &Vector) -> Vector {
        &self.observation * x
    }

    fn g_jacobian(&self, _k: usize, _x: &Vector) -> Matrix {
        self.observation.clone()
    }

    fn process_noise(&self, _k: usize) -> &dyn NoiseDensity {
        &self.process
    }

    fn measurement_noise(&self, _k: usize) -> &dyn NoiseDensity {
        &self.measurement
    }

    fn initial_density(&self) -> &dyn NoiseDensity {
        &self.initial
    }

    fn linear_measurement(&self) -> Option<&Matrix> {
        Some(&self.observation)
    }

    fn as_linear_gaussian(&self) -> Option<&LinearGaussianModel> {
        Some(self)
    }
}

/// Scalar model with periodically modulated saturating dynamics:
/// `x_{k+1} = a_k tanh(pi x_k) + w_k`, `y_k = x_k / 2 + v_k`,
/// `a_k = 1 + 0.5 sin(2 pi k / 20)`, `w ~ N(0, 1/5)`, `v ~ N(0, 1)`,
/// `x_0 ~ N(0, 1)`.
#[derive(Debug, Clone)]
pub struct TanhModel {
    process: GaussianDensity,
    measurement: GaussianDensity,
    initial: GaussianDensity,
    observation: Matrix,
}

impl TanhModel {
    pub fn new() -> Self {
        Self {
            process: GaussianDensity::scalar(0.0, 0.2).expect("valid variance"),
            measurement: GaussianDensity::scalar(0.0, 1.0).expect("valid variance"),
            initial: GaussianDensity::scalar(0.0, 1.0).expect("valid variance"),
            observation: Matrix::from_element(1, 1, 0.5),
        }
    }

    pub fn alpha(k: usize) -> f64 {
        1.0 + 0.5 * (2.0 * PI * k as f64 / 20.0).sin()
    }
}

impl Default for TanhModel {
    fn default() -> Self {
        Self::new()
    }
}

impl StateSpaceModel for TanhModel {
    fn name(&self) -> &str {
        "example2"
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn f(&self, k: usize, x: &Vector) -> Vector {
        x.map(|v| Self::alpha(k) * (PI * v).tanh())
    }

    fn f_jacobian(&self, k: usize, x: &Vector) -> Matrix {
        let t = (PI * x[0]).tanh();
        Matrix::from_element(1, 1, Self::alpha(k) * PI * (1.0 - t * t))
    }

    fn g(&self, _k: usize, x: &Vector) -> Vector {
        x * 0.5
    }

    fn g_jacobian(&self, _k: usize, _x: &Vector) -> Matrix {
        self.observation.clone()
    }

    fn process_noise(&self, _k: usize) -> &dyn NoiseDensity {
        &self.process
    }

    fn measurement_noise(&self, _k: usize) -> &dyn NoiseDensity {
        &self.measurement
    }

    fn initial_density(&self) -> &dyn NoiseDensity {
        &self.initial
    }

    fn linear_measurement(&self) -> Option<&Matrix> {
        Some(&self.observation)
    }
}

type VectorFn = Box<dyn Fn(usize, &Vector) -> Vector + Send + Sync>;
type MatrixFn = Box<dyn Fn(usize, &Vector) -> Matrix + Send + Sync>;

/// Model assembled from arbitrary noise densities and, optionally, closures
/// for the dynamics and measurement maps.
pub struct CustomModel {
    name: String,
    state_dim: usize,
    obs_dim: usize,
    f: VectorFn,
    f_jac: MatrixFn,
    g: VectorFn,
    g_jac: MatrixFn,
    linear: Option<Matrix>,
    process: Arc<dyn NoiseDensity>,
    measurement: Arc<dyn NoiseDensity>,
    initial: Arc<dyn NoiseDensity>,
}

impl CustomModel {
    /// Linear dynamics `F x` and measurement `H x` with the given noises.
    pub fn linear(
        name: impl Into<String>,
        transition: Matrix,
        observation: Matrix,
        process: Arc<dyn NoiseDensity>,
        measurement: Arc<dyn NoiseDensity>,
        initial: Arc<dyn NoiseDensity>,
    ) -> Result<Self> {
        let n = transition.nrows();
        check_dim("transition columns", n, transition.ncols())?;
        check_dim("observation columns", n, observation.ncols())?;
        check_dim("process noise", n, process.dim())?;
        check_dim("initial density", n, initial.dim())?;
        check_dim("measurement noise", observation.nrows(), measurement.dim())?;
        let obs_dim = observation.nrows();
        let (tf, tj) = (transition.clone(), transition);
        let (hg, hj) = (observation.clone(), observation.clone());
        Ok(Self {
            name: name.into(),
            state_dim: n,
            obs_dim,
            f: Box::new(move |_, x| &tf * x),
            f_jac: Box::new(move |_, _| tj.clone()),
            g: Box::new(move |_, x| &hg * x),
            g_jac: Box::new(move |_, _| hj.clone()),
            linear: Some(observation),
            process,
            measurement,
            initial,
        })
    }

    /// Replaces the dynamics map and its Jacobian.
    pub fn with_dynamics(
        mut self,
        f: impl Fn(usize, &Vector) -> Vector + Send + Sync + 'static,
        f_jacobian: impl Fn(usize, &Vector) -> Matrix + Send + Sync + 'static,
    ) -> Self {
        self.f = Box::new(f);
        self.f_jac = Box::new(f_jacobian);
        self
    }

    /// Replaces the measurement map; the model is no longer treated as having
    /// a linear measurement.
    pub fn with_measurement(
        mut self,
        g: impl Fn(usize, &Vector) -> Vector + Send + Sync + 'static,
        g_jacobian: impl Fn(usize, &Vector) -> Matrix + Send + Sync + 'static,
    ) -> Self {
        self.g = Box::new(g);
        self.g_jac = Box::new(g_jacobian);
        self.linear = None;
        self
    }
}

impl StateSpaceModel for CustomModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn f(&self, k: usize, x: &Vector) -> Vector {
        (self.f)(k, x)
    }

    fn f_jacobian(&self, k: usize, x: &Vector) -> Matrix {
        (self.f_jac)(k, x)
    }

    fn g(&self, k: usize, x: &Vector) -> Vector {
        (self.g)(k, x)
    }

    fn g_jacobian(&self, k: usize, x: &Vector) -> Matrix {
        (self.g_jac)(k, x)
    }

    fn process_noise(&self, _k: usize) -> &dyn NoiseDensity {
        self.process.as_ref()
    }

    fn measurement_noise(&self, _k: usize) -> &dyn NoiseDensity {
        self.measurement.as_ref()
    }

    fn initial_density(&self) -> &dyn NoiseDensity {
        self.initial.as_ref()
    }

    fn linear_measurement(&self) -> Option<&Matrix> {
        self.linear.as_ref()
    }
}

/// Three-state linear Gaussian benchmark with a scalar measurement of the sum
/// of the last two states.
pub fn builtin_example1() -> LinearGaussianModel {
    let transition = Matrix::from_row_slice(
        3,
        3,
        &[0.66, -1.31, -1.11, 0.07, 0.73, -0.06, 0.00, 0.08, 0.80],
    );
    let observation = Matrix::from_row_slice(1, 3, &[0.0, 1.0, 1.0]);
    let process_cov = Matrix::from_diagonal(&Vector::from_column_slice(&[0.2, 0.3, 0.5]));
    let measurement_cov = Matrix::from_element(1, 1, 0.1);
    LinearGaussianModel::new(
        "example1",
        transition,
        observation,
        process_cov,
        measurement_cov,
        Vector::zeros(3),
        Matrix::identity(3, 3) * 0.3,
    )
    .expect("built-in matrices are valid")
}

pub fn builtin_example2() -> TanhModel {
    TanhModel::new()
}

/// Looks up a built-in model by its CLI name.
pub fn builtin(name: &str) -> Result<Box<dyn StateSpaceModel>> {
    match name {
        "example1" => Ok(Box::new(builtin_example1())),
        "example2" => Ok(Box::new(builtin_example2())),
        other => Err(Error::Config(format!(
            "unknown model `{other}` (expected example1 or example2)"
        ))),
    }
}

/// A simulated state sequence `x_0..x_T` with its measurements `y_0..y_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub observations: Vec<Vector>,
    pub seed: Option<u64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Simulates with a generator seeded directly from `seed`.
    pub fn from_seed(model: &dyn StateSpaceModel, steps: usize, seed: u64) -> Self {
        let mut rng = crate::rng::seeded(seed);
        let mut traj = simulate(model, steps, &mut rng);
        traj.seed = Some(seed);
        traj
    }
}

/// Forward simulation with independent noise draws per step.
pub fn simulate(model: &dyn StateSpaceModel, steps: usize, rng: &mut dyn RngCore) -> Trajectory {
    let mut states = Vec::with_capacity(steps + 1);
    let mut observations = Vec::with_capacity(steps + 1);
    let mut x = model.initial_density().sample(rng);
    for k in 0..=steps {
        let y = model.g(k, &x) + model.measurement_noise(k).sample(rng);
        observations.push(y);
        let next = if k < steps {
            Some(model.f(k, &x) + model.process_noise(k).sample(rng))
        } else {
            None
        };
        states.push(x);
        match next {
            Some(n) => x = n,
            None => break,
        }
    }
    Trajectory {
        states,
        observations,
        seed: None,
    }
}
