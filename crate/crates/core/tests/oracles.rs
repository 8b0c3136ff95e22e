//! Independent oracles: path enumeration for FFBS, closed-form and grid
//! maximizers for single-particle smoothing, hand-derived gradients.

use mlse::em::EmConfig;
use mlse::em_predictor::{emsp_step, q_hat_pred_grad};
use mlse::em_smoother::{
    emss_estimate, ffbs_smoothed_sets, ffbs_smoothed_weights, ffbs_smoothed_window, q_hat_smooth_grad, SmootherInputs,
    SmootherObjective,
};
use mlse::model::{builtin_example1, LinearGaussianModel, StateSpaceModel};
use mlse::particle_filter::{Conditioning, ParticleSet};
use mlse::rng::seeded;
use mlse::{Matrix, Vector};
use rand::Rng;

fn scalar_model(f: f64, h: f64, s: f64, r: f64) -> LinearGaussianModel {
    let m = |x| Matrix::from_element(1, 1, x);
    LinearGaussianModel::new("scalar", m(f), m(h), m(s), m(r), Vector::zeros(1), m(1.0)).unwrap()
}

fn scalar_set(points: &[f64], weights: &[f64], k: usize) -> ParticleSet {
    ParticleSet::new(
        points.iter().map(|x| Vector::from_element(1, *x)).collect(),
        weights.to_vec(),
        k,
        Conditioning::Filtered,
    )
    .unwrap()
}

/// Marginals of the backward path distribution, by summing over all `N^(n+1)`
/// index paths. Kernel densities are written out explicitly for a scalar
/// Gaussian transition `x' = a x + N(0, s)`.
fn enumerate_paths(sets: &[ParticleSet], a: f64, s: f64) -> Vec<Vec<f64>> {
    let kernel = |to: f64, from: f64| (-(to - a * from).powi(2) / (2.0 * s)).exp() / (2.0 * std::f64::consts::PI * s).sqrt();
    let x = |k: usize, i: usize| sets[k].particles()[i][0];
    let w = |k: usize, i: usize| sets[k].weights()[i];
    let n = sets.len() - 1;
    let big_n = sets[0].len();
    let denom = |k: usize, t: usize| (0..big_n).map(|d| w(k, d) * kernel(x(k + 1, t), x(k, d))).sum::<f64>();
    let mut out = vec![vec![0.0; big_n]; n + 1];
    for code in 0..big_n.pow(n as u32 + 1) {
        let path: Vec<usize> = (0..=n).map(|k| code / big_n.pow(k as u32) % big_n).collect();
        let mut p = w(n, path[n]);
        for k in 0..n {
            p *= w(k, path[k]) * kernel(x(k + 1, path[k + 1]), x(k, path[k])) / denom(k, path[k + 1]);
        }
        for k in 0..=n {
            out[k][path[k]] += p;
        }
    }
    out
}

#[test]
fn ffbs_matches_path_enumeration_three_particles_two_steps() {
    let model = scalar_model(0.9, 1.0, 0.5, 1.0);
    let sets = vec![
        scalar_set(&[-0.4, 0.3, 1.1], &[0.2, 0.5, 0.3], 0),
        scalar_set(&[0.1, 0.9, -0.7], &[0.6, 0.1, 0.3], 1),
        scalar_set(&[0.5, -0.2, 1.4], &[0.25, 0.35, 0.4], 2),
    ];
    let got = ffbs_smoothed_weights(&model, &sets, 2).unwrap();
    let want = enumerate_paths(&sets, 0.9, 0.5);
    for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
        assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
    }
}

#[test]
fn ffbs_matches_path_enumeration_random_sets() {
    let mut rng = seeded(5);
    for _ in 0..10 {
        let (a, s) = (rng.random_range(-1.2..1.2), rng.random_range(0.2..2.0));
        let model = scalar_model(a, 1.0, s, 1.0);
        let sets: Vec<ParticleSet> = (0..4)
            .map(|k| {
                let p: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
                let total: f64 = w.iter().sum();
                scalar_set(&p, &w.iter().map(|x| x / total).collect::<Vec<_>>(), k)
            })
            .collect();
        let got = ffbs_smoothed_weights(&model, &sets, 3).unwrap();
        let want = enumerate_paths(&sets, a, s);
        for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((g - w).abs() <= 1e-12);
        }
        // A window ending at the same n reproduces the tail of the full pass.
        let window = ffbs_smoothed_window(&model, &sets, 2, 3).unwrap();
        assert_eq!(window[0].weights(), &got[2][..]);
        assert_eq!(window[1].weights(), &got[3][..]);
    }
}

/// Single-particle smoothing for `x' = a x + N(0, s)`, `y = h x + N(0, r)`:
/// the objective is a sum of three quadratics whose maximizer is
/// `(h y / r + a p / s + a q / s) / (h^2 / r + 1 / s + a^2 / s)`.
#[test]
fn single_particle_smoother_maximizer() {
    let (a, h, s, r) = (0.8, 1.3, 0.6, 0.4);
    let model = scalar_model(a, h, s, r);
    let (p, c, q, y) = (0.7, -0.2, 1.5, 0.9);
    let inputs = SmootherInputs::new(
        Some(scalar_set(&[p], &[1.0], 0)),
        scalar_set(&[c], &[1.0], 1),
        scalar_set(&[q], &[1.0], 2).reweighted(vec![1.0], Conditioning::Smoothed { given: 3 }).unwrap(),
        Vector::from_element(1, y),
        3,
    )
    .unwrap();
    let closed = (h * y / r + a * p / s + a * q / s) / (h * h / r + 1.0 / s + a * a / s);
    let cfg = EmConfig { rel_tol: 1e-12, max_iters: 500, ..EmConfig::default() };
    let est = emss_estimate(&model, &inputs, &Vector::from_element(1, -3.0), &cfg, &mut seeded(0)).unwrap();
    assert!((est.estimate[0] - closed).abs() < 1e-7, "{} vs {closed}", est.estimate[0]);

    let objective = SmootherObjective::new(&model, &inputs, &cfg).unwrap();
    let (mut best, mut arg) = (f64::NEG_INFINITY, 0.0);
    for i in 0..=8000 {
        let x = -4.0 + i as f64 * 0.001;
        let l = objective.log_density(&Vector::from_element(1, x)).unwrap();
        if l > best {
            best = l;
            arg = x;
        }
    }
    assert!((arg - closed).abs() <= 0.001);
    assert!(est.log_density >= best - 1e-12);
}

/// With one particle everywhere, the smoother gradient for linear dynamics is
/// `H' R^-1 (y - H x) - S^-1 (x - F p) + F' S^-1 (q - F x)`.
#[test]
fn smoother_gradient_linear_dynamics_by_hand() {
    let model = builtin_example1();
    let f = model.transition().clone();
    let h = model.observation().clone();
    let s_inv = model.process_cov().clone().try_inverse().unwrap();
    let r_inv = model.measurement_cov().clone().try_inverse().unwrap();
    let mut rng = seeded(9);
    let mut rv = |d: usize| Vector::from_fn(d, |_, _| rng.random_range(-1.5..1.5));
    for _ in 0..20 {
        let (p, c, q, y, x, anchor) = (rv(3), rv(3), rv(3), rv(1), rv(3), rv(3));
        let set = |v: &Vector, k| ParticleSet::new(vec![v.clone()], vec![1.0], k, Conditioning::Filtered).unwrap();
        let inputs = SmootherInputs::new(
            Some(set(&p, 4)),
            set(&c, 5),
            set(&q, 6).reweighted(vec![1.0], Conditioning::Smoothed { given: 9 }).unwrap(),
            y.clone(),
            9,
        )
        .unwrap();
        let g = q_hat_smooth_grad(&model, &inputs, &x, &anchor).unwrap();
        let want = h.transpose() * &r_inv * (&y - &h * &x) - &s_inv * (&x - &f * &p) + f.transpose() * &s_inv * (&q - &f * &x);
        assert!((&g - &want).amax() <= 1e-10 * want.amax().max(1.0));
    }
}

#[test]
fn predictor_single_particle_is_propagated_filter_mode() {
    // N = 1 and zero-mean process noise: the predicted mode is F times the
    // particle, whatever the start.
    let model = builtin_example1();
    let p = Vector::from_column_slice(&[0.4, -0.3, 0.8]);
    let ps = ParticleSet::new(vec![p.clone()], vec![1.0], 6, Conditioning::Filtered).unwrap();
    let est = emsp_step(&model, &ps, 7, &Vector::from_element(3, 5.0), &EmConfig::default(), &mut seeded(1)).unwrap();
    assert!((&est.estimate - model.transition() * &p).amax() < 1e-12);
    let g = q_hat_pred_grad(&model, &ps, &est.estimate, &est.estimate, 7).unwrap();
    assert!(g.amax() < 1e-9);
}

#[test]
fn smoothed_weights_normalized_on_filter_output() {
    let model = builtin_example1();
    let traj = mlse::model::simulate(&model, 12, &mut seeded(3));
    let pf = mlse::particle_filter::run_bootstrap(&model, &traj.observations, 150, 0.5, &mut seeded(4)).unwrap();
    let sets = ffbs_smoothed_sets(&model, &pf.filtered_sets(), 12).unwrap();
    for ps in &sets {
        let total: f64 = ps.weights().iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
        assert!(ps.weights().iter().all(|w| *w >= 0.0));
    }
    assert_eq!(sets[12].weights(), pf.filtered(12).weights());
    // kernel sanity: smoothing never assigns mass where the process noise
    // density vanishes (it is Gaussian here, so every weight is positive)
    assert!(model.process_noise(0).log_pdf(&Vector::zeros(3)).unwrap().is_finite());
}
