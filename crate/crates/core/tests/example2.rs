//! The tanh model: bimodal filtered densities, multi-start EM and the
//! exported density grids.

use std::sync::Arc;

use mlse::densities::UniformBox;
use mlse::em::{EmConfig, StartPolicy};
use mlse::em_filter::{emsf_initial, emsf_step, FilterObjective};
use mlse::experiment::{export_density_grid, GridSpec};
use mlse::fp_filter::{fpsf_iterate, fpsf_step};
use mlse::model::{builtin_example2, simulate};
use mlse::particle_filter::{run_bootstrap, BootstrapRun};
use mlse::rng::derive_stream;
use mlse::Vector;

const SEED: u64 = 77;

fn setup() -> (mlse::model::TanhModel, Vec<Vector>, BootstrapRun) {
    let model = builtin_example2();
    let traj = simulate(&model, 40, &mut derive_stream(SEED, "trajectory"));
    let pf = run_bootstrap(&model, &traj.observations, 500, 0.5, &mut derive_stream(SEED, "particles")).unwrap();
    (model, traj.observations, pf)
}

fn s(x: f64) -> Vector {
    Vector::from_element(1, x)
}

fn grid(lower: f64, upper: f64, spacing: f64) -> GridSpec {
    GridSpec { lower, upper, spacing, steps: None }
}

/// Local maxima of a sampled curve that stand out from the lowest point
/// between them by at least `prominence`.
fn prominent_modes(xs: &[f64], ys: &[f64], prominence: f64) -> Vec<f64> {
    let mut peaks: Vec<usize> = (1..ys.len() - 1).filter(|&i| ys[i] > ys[i - 1] && ys[i] >= ys[i + 1]).collect();
    peaks.retain(|&i| ys[i] - ys[..=i].iter().cloned().fold(f64::INFINITY, f64::min) > prominence
        && ys[i] - ys[i..].iter().cloned().fold(f64::INFINITY, f64::min) > prominence);
    let mut modes: Vec<usize> = Vec::new();
    for p in peaks {
        match modes.last() {
            Some(&q) if ys[q..=p].iter().cloned().fold(f64::INFINITY, f64::min) > ys[q].min(ys[p]) - prominence => {
                if ys[p] > ys[q] {
                    *modes.last_mut().unwrap() = p;
                }
            }
            _ => modes.push(p),
        }
    }
    modes.into_iter().map(|i| xs[i]).collect()
}

#[test]
fn fixed_point_iteration_finds_both_modes_of_a_bimodal_step() {
    let (model, ys, pf) = setup();
    let tight = EmConfig { rel_tol: 1e-12, max_iters: 2000, ..EmConfig::default() };
    let mut found = 0;
    for k in 1..ys.len() {
        let g = export_density_grid(&model, Some(pf.carried(k - 1)), &ys[k], k, &grid(-3.0, 3.0, 0.001)).unwrap();
        let modes = prominent_modes(&g.points, &g.log_density, 0.05);
        if modes.len() < 2 {
            continue;
        }
        found += 1;
        let (a, _) = fpsf_step(&model, pf.carried(k - 1), &ys[k], &s(modes[0]), k, &tight).unwrap();
        let (b, _) = fpsf_step(&model, pf.carried(k - 1), &ys[k], &s(modes[modes.len() - 1]), k, &tight).unwrap();
        assert!((a[0] - b[0]).abs() > 0.3, "step {k}: both starts reached {a} / {b}");
        for x in [&a, &b] {
            let next = fpsf_iterate(&model, pf.carried(k - 1), &ys[k], x, k).unwrap();
            assert!((next[0] - x[0]).abs() <= 1e-9, "step {k}: {x} is not a fixed point");
            assert!((x[0] - modes.iter().cloned().fold(f64::NAN, |best, m| if best.is_nan() || (m - x[0]).abs() < (best - x[0]).abs() { m } else { best })).abs() <= 0.002);
        }
    }
    assert!(found > 0, "no bimodal step in this run");
}

#[test]
fn multi_start_emsf_matches_grid_argmax() {
    let (model, ys, pf) = setup();
    let cfg = EmConfig {
        rel_tol: 1e-10,
        max_iters: 500,
        restarts: 10,
        start: StartPolicy::PredictionThenRandom,
        restart_density: Some(Arc::new(UniformBox::cube(1, -2.0, 2.0).unwrap())),
        ..EmConfig::default()
    };
    let mut rng = derive_stream(SEED, "restarts/emsf");
    let mut prev = s(0.0);
    for (k, y) in ys.iter().enumerate().take(21) {
        let est = if k == 0 {
            emsf_initial(&model, y, &cfg, &mut rng).unwrap()
        } else {
            emsf_step(&model, pf.carried(k - 1), y, &prev, k, &cfg, &mut rng).unwrap()
        };
        prev = est.estimate.clone();
        let g = export_density_grid(&model, (k > 0).then(|| pf.carried(k - 1)), y, k, &grid(-3.0, 3.0, 0.001)).unwrap();
        let (i, best) = g.log_density.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, l)| if *l > acc.1 { (i, *l) } else { acc });
        let close = (g.points[i] - est.estimate[0]).abs() <= 0.001 + 1e-9;
        // Modes of nearly equal height may swap between grid and optimizer.
        let tie = (best - est.log_density).abs() <= 1e-6;
        assert!(close || tie, "step {k}: grid {} vs EMSF {}", g.points[i], est.estimate[0]);
        assert!(est.log_density >= best - 1e-6, "step {k}: EMSF below grid maximum");
    }
}

#[test]
fn density_grid_is_nonnegative_and_integrates_stably() {
    let (model, ys, pf) = setup();
    for k in [0, 5, 10, 25] {
        let prev = (k > 0).then(|| pf.carried(k - 1));
        let coarse = export_density_grid(&model, prev, &ys[k], k, &grid(-6.0, 6.0, 0.01)).unwrap();
        let fine = export_density_grid(&model, prev, &ys[k], k, &grid(-6.0, 6.0, 0.005)).unwrap();
        let trapezoid = |g: &mlse::experiment::DensityGrid| {
            g.points
                .windows(2)
                .zip(g.log_density.windows(2))
                .map(|(x, l)| 0.5 * (x[1] - x[0]) * (l[0].exp() + l[1].exp()))
                .sum::<f64>()
        };
        assert!(coarse.log_density.iter().all(|l| l.exp() >= 0.0 && !l.is_nan()));
        let (a, b) = (trapezoid(&coarse), trapezoid(&fine));
        assert!(a.is_finite() && a > 0.0);
        assert!((a - b).abs() / b <= 0.01, "step {k}: {a} vs {b}");
    }
}

#[test]
fn density_grid_matches_objective() {
    let (model, ys, pf) = setup();
    let k = 12;
    let g = export_density_grid(&model, Some(pf.carried(k - 1)), &ys[k], k, &grid(-1.0, 1.0, 0.25)).unwrap();
    assert_eq!(g.points.len(), 9);
    let objective = FilterObjective::new(&model, pf.carried(k - 1), &ys[k], k, &EmConfig::default()).unwrap();
    for (x, l) in g.points.iter().zip(&g.log_density) {
        assert_eq!(*l, objective.log_density(&s(*x)).unwrap());
    }
    assert!(export_density_grid(&model, None, &ys[k], k, &grid(-1.0, 1.0, 0.25)).is_err());
    assert!(export_density_grid(&model, Some(pf.carried(k - 1)), &ys[k], k, &grid(1.0, -1.0, 0.25)).is_err());
}
