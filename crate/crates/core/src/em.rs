//! Shared EM machinery: configuration, iterate traces, the convergence test,
//! backtracking gradient ascent for M-steps and multi-start selection.

use std::fmt;
use std::sync::Arc;

use rand::RngCore;

use crate::densities::NoiseDensity;
use crate::error::{Error, Result};
use crate::par;
use crate::Vector;

/// How the M-step maximizes the surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MStepKind {
    /// Closed form when the model admits one (linear measurement with
    /// Gaussian noises), gradient ascent otherwise.
    ClosedFormAuto,
    GradientAscent,
}

/// How starting points are chosen for the restarts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartPolicy {
    /// Restart 0 starts at the propagated previous estimate; the others are
    /// random.
    PredictionThenRandom,
    /// Every restart is random.
    AllRandom,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentConfig {
    pub initial_step: f64,
    pub backtrack: f64,
    pub max_line_search: usize,
    pub grad_tol: f64,
    pub max_inner_iters: usize,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            backtrack: 0.5,
            max_line_search: 60,
            grad_tol: 1e-8,
            max_inner_iters: 2000,
        }
    }
}

#[derive(Clone)]
pub struct EmConfig {
    pub rel_tol: f64,
    pub max_iters: usize,
    pub restarts: usize,
    pub start: StartPolicy,
    /// Density for random starting points. When absent, random starts are the
    /// prediction plus twice a centered process-noise draw (for Gaussian noise
    /// this is a Gaussian around the prediction with four times the process
    /// covariance).
    pub restart_density: Option<Arc<dyn NoiseDensity>>,
    pub m_step: MStepKind,
    pub ascent: AscentConfig,
}

impl fmt::Debug for EmConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmConfig")
            .field("rel_tol", &self.rel_tol)
            .field("max_iters", &self.max_iters)
            .field("restarts", &self.restarts)
            .field("start", &self.start)
            .field("restart_density", &self.restart_density)
            .field("m_step", &self.m_step)
            .field("ascent", &self.ascent)
            .finish()
    }
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            rel_tol: 0.005,
            max_iters: 50,
            restarts: 1,
            start: StartPolicy::PredictionThenRandom,
            restart_density: None,
            m_step: MStepKind::ClosedFormAuto,
            ascent: AscentConfig::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if !(self.rel_tol > 0.0) {
            return Err(Error::Config("rel_tol must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if let Some(d) = &self.restart_density {
            if d.dim() != state_dim {
                return Err(Error::DimensionMismatch {
                    context: "restart density",
                    expected: state_dim,
                    found: d.dim(),
                });
            }
        }
        let a = &self.ascent;
        if !(a.initial_step > 0.0 && a.backtrack > 0.0 && a.backtrack < 1.0) {
            return Err(Error::Config("ascent step must be positive and backtrack in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_m_step(mut self, m_step: MStepKind) -> Self {
        self.m_step = m_step;
        self
    }
}

/// The iterate sequence of one EM run.
#[derive(Debug, Clone, PartialEq)]
pub struct EmTrace {
    /// `x^0, x^1, ..., x^I`.
    pub iterates: Vec<Vector>,
    /// `Q(x^{i+1}, x^i)` for each completed iteration.
    pub q_values: Vec<f64>,
    /// `Q(x^i, x^i)` for each completed iteration, the baseline the M-step
    /// must not fall below.
    pub q_baselines: Vec<f64>,
    /// Empirical log-density of every iterate, up to a shared constant.
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
    /// An M-step found no ascent direction and returned its anchor.
    pub stalled: bool,
    pub restart_index: usize,
}

impl EmTrace {
    pub fn iterations(&self) -> usize {
        self.iterates.len() - 1
    }

    pub fn last(&self) -> &Vector {
        self.iterates.last().expect("trace holds the starting point")
    }

    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihoods.last().expect("trace holds the starting point")
    }

    /// Largest decrease of the log-likelihood between consecutive iterates
    /// (zero when the sequence is non-decreasing).
    pub fn max_decrease(&self) -> f64 {
        self.log_likelihoods
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0, f64::max)
    }

    pub fn is_monotone(&self, slack: f64) -> bool {
        self.max_decrease() <= slack
    }

    /// Whether every M-step met its baseline, `Q(x^{i+1}, x^i) >= Q(x^i, x^i)`.
    pub fn m_steps_improve(&self, slack: f64) -> bool {
        self.q_values
            .iter()
            .zip(&self.q_baselines)
            .all(|(q, base)| *q >= *base - slack)
    }
}

/// Relative change test `max_q |(next_q - prev_q) / next_q| <= tol`, with an
/// absolute test for components whose magnitude is below `1e-12`.
pub fn has_converged(prev: &Vector, next: &Vector, rel_tol: f64) -> bool {
    prev.iter().zip(next.iter()).all(|(p, n)| {
        let delta = (n - p).abs();
        if n.abs() < 1e-12 {
            delta <= rel_tol
        } else {
            delta / n.abs() <= rel_tol
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStepOutcome {
    pub point: Vector,
    /// Inner gradient-ascent iterations (zero for closed forms).
    pub inner_iterations: usize,
    /// No ascent direction was found.
    pub stalled: bool,
}

impl MStepOutcome {
    pub fn closed_form(point: Vector) -> Self {
        Self {
            point,
            inner_iterations: 0,
            stalled: false,
        }
    }
}

/// Backtracking (Armijo) steepest ascent of `objective` from `start`. Every
/// accepted step strictly increases the objective, so the result is never
/// worse than the start. The step length adapts between iterations.
pub fn gradient_ascent(
    objective: impl Fn(&Vector) -> Result<f64>,
    gradient: impl Fn(&Vector) -> Result<Vector>,
    start: &Vector,
    cfg: &AscentConfig,
) -> Result<MStepOutcome> {
    let mut x = start.clone();
    let mut fx = objective(&x)?;
    let mut step = cfg.initial_step;
    let mut iterations = 0;
    while iterations < cfg.max_inner_iters {
        let g = gradient(&x)?;
        let g_norm2 = g.norm_squared();
        if !g_norm2.is_finite() || g_norm2.sqrt() <= cfg.grad_tol {
            break;
        }
        let mut accepted = None;
        let mut t = step;
        for _ in 0..cfg.max_line_search {
            let candidate = &x + &g * t;
            let fc = objective(&candidate)?;
            if fc.is_finite() && fc >= fx + 1e-4 * t * g_norm2 && fc > fx {
                accepted = Some((candidate, fc));
                break;
            }
            t *= cfg.backtrack;
        }
        match accepted {
            Some((candidate, fc)) => {
                x = candidate;
                fx = fc;
                step = t / cfg.backtrack;
                iterations += 1;
            }
            None => {
                return Ok(MStepOutcome {
                    point: x,
                    inner_iterations: iterations,
                    stalled: iterations == 0,
                })
            }
        }
    }
    Ok(MStepOutcome {
        point: x,
        inner_iterations: iterations,
        stalled: false,
    })
}

/// The three ingredients an EM iteration needs.
pub trait EmObjective: Sync {
    /// Surrogate `Q(x, anchor)`.
    fn surrogate(&self, x: &Vector, anchor: &Vector) -> Result<f64>;
    /// `argmax_x Q(x, anchor)`.
    fn m_step(&self, anchor: &Vector) -> Result<MStepOutcome>;
    /// The log-density the iterates climb, up to an additive constant.
    fn log_density(&self, x: &Vector) -> Result<f64>;
    /// Time index, for error reporting.
    fn step(&self) -> usize;
}

/// Runs EM from `start` until the relative-change criterion holds or
/// `max_iters` M-steps have been taken.
pub fn run_em(
    objective: &dyn EmObjective,
    start: &Vector,
    rel_tol: f64,
    max_iters: usize,
    restart_index: usize,
) -> Result<EmTrace> {
    let mut trace = EmTrace {
        iterates: vec![start.clone()],
        q_values: Vec::new(),
        q_baselines: Vec::new(),
        log_likelihoods: vec![objective.log_density(start)?],
        converged: false,
        stalled: false,
        restart_index,
    };
    for _ in 0..max_iters {
        let anchor = trace.last().clone();
        let outcome = objective.m_step(&anchor)?;
        let q_next = objective.surrogate(&outcome.point, &anchor)?;
        let q_base = objective.surrogate(&anchor, &anchor)?;
        let converged = has_converged(&anchor, &outcome.point, rel_tol);
        trace.log_likelihoods.push(objective.log_density(&outcome.point)?);
        trace.q_values.push(q_next);
        trace.q_baselines.push(q_base);
        trace.iterates.push(outcome.point);
        if outcome.stalled {
            trace.stalled = true;
            break;
        }
        if converged {
            trace.converged = true;
            break;
        }
    }
    Ok(trace)
}

/// Result of a multi-start EM estimate.
#[derive(Debug, Clone)]
pub struct EmEstimate {
    pub estimate: Vector,
    /// Empirical log-density at the estimate.
    pub log_density: f64,
    /// Position of the winner in `traces`.
    pub winner: usize,
    /// Traces of the restarts that did not degenerate, in restart order.
    pub traces: Vec<EmTrace>,
    /// Restart indices skipped because their responsibilities degenerated.
    pub skipped: Vec<usize>,
}

impl EmEstimate {
    pub fn winning_trace(&self) -> &EmTrace {
        &self.traces[self.winner]
    }

    pub fn iterations(&self) -> usize {
        self.winning_trace().iterations()
    }

    pub fn converged(&self) -> bool {
        self.winning_trace().converged
    }
}

fn is_degenerate(err: &Error) -> bool {
    matches!(
        err,
        Error::DegenerateResponsibilities { .. } | Error::SupportMismatch { .. }
    )
}

/// Runs one EM per starting point (concurrently when the `parallel` feature is
/// on) and keeps the final iterate with the highest log-density. Ties go to
/// the lower restart index. Restarts whose responsibilities degenerate are
/// skipped; other errors propagate.
pub fn multi_start(
    objective: &dyn EmObjective,
    starts: &[Vector],
    rel_tol: f64,
    max_iters: usize,
) -> Result<EmEstimate> {
    let results = par::map_range(starts.len(), |r| run_em(objective, &starts[r], rel_tol, max_iters, r));
    let mut traces = Vec::new();
    let mut skipped = Vec::new();
    for (r, result) in results.into_iter().enumerate() {
        match result {
            Ok(trace) => traces.push(trace),
            Err(e) if is_degenerate(&e) => skipped.push(r),
            Err(e) => return Err(e),
        }
    }
    let mut winner: Option<usize> = None;
    for (i, t) in traces.iter().enumerate() {
        let ll = t.final_log_likelihood();
        let better = match winner {
            None => !ll.is_nan(),
            Some(w) => ll > traces[w].final_log_likelihood(),
        };
        if better {
            winner = Some(i);
        }
    }
    let winner = winner.ok_or(Error::AllRestartsDegenerate {
        step: objective.step(),
    })?;
    Ok(EmEstimate {
        estimate: traces[winner].last().clone(),
        log_density: traces[winner].final_log_likelihood(),
        winner,
        traces,
        skipped,
    })
}

/// Starting points per the configured policy. `prediction` is the
/// deterministic start; `spread` is the noise density used for random starts
/// when no restart density is configured.
pub fn starting_points(
    config: &EmConfig,
    prediction: &Vector,
    spread: &dyn NoiseDensity,
    rng: &mut dyn RngCore,
) -> Vec<Vector> {
    let random = |rng: &mut dyn RngCore| match &config.restart_density {
        Some(d) => d.sample(rng),
        None => prediction + (spread.sample(rng) - spread.mean()) * 2.0,
    };
    (0..config.restarts)
        .map(|r| {
            if r == 0 && config.start == StartPolicy::PredictionThenRandom {
                prediction.clone()
            } else {
                random(rng)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn convergence_criterion() {
        assert!(has_converged(&v(&[1.0, 2.0]), &v(&[1.004, 2.0]), 0.005));
        assert!(!has_converged(&v(&[1.0, 2.0]), &v(&[1.006, 2.0]), 0.005));
        // Zero component falls back to the absolute test.
        assert!(has_converged(&v(&[0.004]), &v(&[0.0]), 0.005));
        assert!(!has_converged(&v(&[0.006]), &v(&[0.0]), 0.005));
    }

    #[test]
    fn ascent_finds_quadratic_maximum() {
        let target = v(&[1.0, -2.0]);
        let f = |x: &Vector| Ok(-(x - &target).norm_squared() * 3.0);
        let g = |x: &Vector| Ok(-(x - &target) * 6.0);
        let out = gradient_ascent(f, g, &v(&[10.0, 10.0]), &AscentConfig::default()).unwrap();
        assert!((&out.point - &target).amax() < 1e-8);
        assert!(!out.stalled);
    }

    #[test]
    fn ascent_never_decreases() {
        // Gradient pointing the wrong way: no step is accepted.
        let f = |x: &Vector| Ok(-x.norm_squared());
        let g = |x: &Vector| Ok(x * 2.0);
        let start = v(&[1.0]);
        let out = gradient_ascent(f, g, &start, &AscentConfig::default()).unwrap();
        assert_eq!(out.point, start);
        assert!(out.stalled);
    }

    #[test]
    fn config_validation() {
        assert!(EmConfig::default().validate(3).is_ok());
        let bad = EmConfig {
            rel_tol: 0.0,
            ..EmConfig::default()
        };
        assert!(bad.validate(1).is_err());
        assert!(EmConfig::default().with_restarts(0).validate(1).is_err());
        let bad = EmConfig {
            max_iters: 0,
            ..EmConfig::default()
        };
        assert!(bad.validate(1).is_err());
    }
}
