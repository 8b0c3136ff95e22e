//! Maximum-likelihood recursive state estimation for nonlinear, non-Gaussian
//! state-space models.
//!
//! A bootstrap particle filter propagates the conditional state densities and
//! expectation-maximization iterations climb the smooth empirical density built
//! from those particles, the known noise densities and the current measurement.
//! The crate provides the EM filter, its fixed-point specialization for linear
//! measurements with Gaussian noises, the EM predictor and the EM smoother,
//! together with Kalman/RTS reference estimators and an experiment runner.
//!
//! Particle loops run on rayon when the `parallel` feature is enabled (the
//! default). All reductions are performed sequentially in index order, so a
//! fixed seed produces bit-identical results with or without the feature.

pub mod densities;
pub mod em;
pub mod em_filter;
pub mod em_predictor;
pub mod em_smoother;
pub mod error;
pub mod experiment;
pub mod fp_filter;
pub mod kalman;
pub mod mixture;
pub mod model;
mod par;
pub mod particle_filter;
pub mod rng;

pub use error::{Error, Result};

/// Dense column vector used for states and observations.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix.
pub type Matrix = nalgebra::DMatrix<f64>;
