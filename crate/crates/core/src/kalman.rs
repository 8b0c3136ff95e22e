//! Kalman filter and Rauch-Tung-Striebel smoother for linear Gaussian models.
//! These are the reference estimators the EM estimators are checked against:
//! for Gaussian densities the conditional mean and mode coincide.

use crate::error::{check_dim, Error, Result};
use crate::densities::NoiseDensity as _;
use crate::model::LinearGaussianModel;
use crate::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: Vector,
    pub covariance: Matrix,
}

impl GaussianBelief {
    pub fn new(mean: Vector, covariance: Matrix) -> Result<Self> {
        check_dim("belief covariance", mean.len(), covariance.nrows())?;
        check_dim("belief covariance", mean.len(), covariance.ncols())?;
        Ok(Self { mean, covariance })
    }
}

fn symmetrize(m: Matrix) -> Matrix {
    (&m + m.transpose()) * 0.5
}

pub fn kf_predict(transition: &Matrix, process_cov: &Matrix, belief: &GaussianBelief) -> Result<GaussianBelief> {
    let n = belief.mean.len();
    check_dim("transition", n, transition.ncols())?;
    check_dim("process covariance", transition.nrows(), process_cov.nrows())?;
    let mean = transition * &belief.mean;
    let covariance = symmetrize(transition * &belief.covariance * transition.transpose() + process_cov);
    Ok(GaussianBelief { mean, covariance })
}

/// Measurement update with the Joseph-form covariance.
pub fn kf_update(
    observation: &Matrix,
    measurement_cov: &Matrix,
    belief: &GaussianBelief,
    y: &Vector,
) -> Result<GaussianBelief> {
    let n = belief.mean.len();
    check_dim("observation matrix", n, observation.ncols())?;
    check_dim("observation", observation.nrows(), y.len())?;
    check_dim("measurement covariance", y.len(), measurement_cov.nrows())?;
    let p = &belief.covariance;
    let innovation_cov = symmetrize(observation * p * observation.transpose() + measurement_cov);
    let chol = innovation_cov
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("innovation covariance"))?;
    // K = P H^T S^{-1}  <=>  S K^T = H P
    let gain = chol.solve(&(observation * p)).transpose();
    let mean = &belief.mean + &gain * (y - observation * &belief.mean);
    let i_kh = Matrix::identity(n, n) - &gain * observation;
    let covariance =
        symmetrize(&i_kh * p * i_kh.transpose() + &gain * measurement_cov * gain.transpose());
    Ok(GaussianBelief { mean, covariance })
}

/// Backward RTS pass. `predicted[k]` is the prior at step `k` (before `y_k`),
/// `filtered[k]` the posterior after `y_k`.
pub fn rts_smooth(
    transition: &Matrix,
    filtered: &[GaussianBelief],
    predicted: &[GaussianBelief],
) -> Result<Vec<GaussianBelief>> {
    check_dim("predicted beliefs", filtered.len(), predicted.len())?;
    let Some(last) = filtered.last() else {
        return Ok(Vec::new());
    };
    let mut smoothed = vec![last.clone(); filtered.len()];
    for k in (0..filtered.len() - 1).rev() {
        let pf = &filtered[k].covariance;
        let next_pred = &predicted[k + 1];
        let chol = next_pred
            .covariance
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("predicted covariance"))?;
        // G = P_{k|k} F^T P_{k+1|k}^{-1}  <=>  P_{k+1|k} G^T = F P_{k|k}
        let gain = chol.solve(&(transition * pf)).transpose();
        let mean = &filtered[k].mean + &gain * (&smoothed[k + 1].mean - &next_pred.mean);
        let covariance = symmetrize(
            pf + &gain * (&smoothed[k + 1].covariance - &next_pred.covariance) * gain.transpose(),
        );
        smoothed[k] = GaussianBelief { mean, covariance };
    }
    Ok(smoothed)
}

/// Priors and posteriors of a full Kalman pass.
#[derive(Debug, Clone)]
pub struct KalmanRun {
    pub predicted: Vec<GaussianBelief>,
    pub filtered: Vec<GaussianBelief>,
}

pub fn run_filter(model: &LinearGaussianModel, observations: &[Vector]) -> Result<KalmanRun> {
    let mut predicted = Vec::with_capacity(observations.len());
    let mut filtered: Vec<GaussianBelief> = Vec::with_capacity(observations.len());
    for (k, y) in observations.iter().enumerate() {
        let prior = if k == 0 {
            GaussianBelief::new(model.initial().mean(), model.initial().covariance().clone())?
        } else {
            kf_predict(model.transition(), model.process_cov(), &filtered[k - 1])?
        };
        let post = kf_update(model.observation(), model.measurement_cov(), &prior, y)?;
        predicted.push(prior);
        filtered.push(post);
    }
    Ok(KalmanRun {
        predicted,
        filtered,
    })
}

impl KalmanRun {
    pub fn smooth(&self, model: &LinearGaussianModel) -> Result<Vec<GaussianBelief>> {
        rts_smooth(model.transition(), &self.filtered, &self.predicted)
    }

    /// Mean of `x_{m + horizon}` given `y_0..y_m`.
    pub fn predicted_mean(&self, model: &LinearGaussianModel, m: usize, horizon: usize) -> Result<Vector> {
        let mut belief = self.filtered[m].clone();
        for _ in 0..horizon {
            belief = kf_predict(model.transition(), model.process_cov(), &belief)?;
        }
        Ok(belief.mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_example1, simulate};
    use crate::rng::seeded;

    fn scalar(mean: f64, var: f64) -> GaussianBelief {
        GaussianBelief::new(Vector::from_element(1, mean), Matrix::from_element(1, 1, var)).unwrap()
    }

    fn m1(x: f64) -> Matrix {
        Matrix::from_element(1, 1, x)
    }

    #[test]
    fn predict_examples() {
        let b = scalar(0.7, 2.0);
        let same = kf_predict(&m1(1.0), &m1(1e-20), &b).unwrap();
        assert!((same.mean[0] - 0.7).abs() < 1e-15 && (same.covariance[(0, 0)] - 2.0).abs() < 1e-12);
        let p = kf_predict(&m1(2.0), &m1(1.0), &scalar(0.0, 1.0)).unwrap();
        assert_eq!(p.mean[0], 0.0);
        assert_eq!(p.covariance[(0, 0)], 5.0);
    }

    #[test]
    fn predict_example1_first_step() {
        // F * 0.3 I * F^T + S, evaluated entrywise.
        let m = builtin_example1();
        let f = m.transition();
        let b = GaussianBelief::new(Vector::zeros(3), Matrix::identity(3, 3) * 0.3).unwrap();
        let p = kf_predict(f, m.process_cov(), &b).unwrap();
        let s = [0.2, 0.3, 0.5];
        for i in 0..3 {
            for j in 0..3 {
                let mut e = 0.0;
                for l in 0..3 {
                    e += 0.3 * f[(i, l)] * f[(j, l)];
                }
                if i == j {
                    e += s[i];
                }
                assert!((p.covariance[(i, j)] - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn update_examples() {
        let post = kf_update(&m1(1.0), &m1(1.0), &scalar(0.0, 1.0), &Vector::from_element(1, 2.0)).unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-15);
        assert!((post.covariance[(0, 0)] - 0.5).abs() < 1e-15);
        let prior = scalar(0.3, 0.8);
        let post = kf_update(&m1(1.0), &m1(1e12), &prior, &Vector::from_element(1, 50.0)).unwrap();
        assert!((post.mean[0] - 0.3).abs() < 1e-6);
        assert!((post.covariance[(0, 0)] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn joseph_form_is_symmetric() {
        let m = builtin_example1();
        let traj = simulate(&m, 100, &mut seeded(3));
        let run = run_filter(&m, &traj.observations).unwrap();
        let smoothed = run.smooth(&m).unwrap();
        for b in run.filtered.iter().chain(&run.predicted).chain(&smoothed) {
            let c = &b.covariance;
            assert!((c - c.transpose()).amax() <= 1e-10);
            assert!(c.clone().cholesky().is_some());
        }
    }

    #[test]
    fn rts_base_case_and_contraction() {
        let m = builtin_example1();
        let traj = simulate(&m, 30, &mut seeded(4));
        let run = run_filter(&m, &traj.observations).unwrap();
        let smoothed = run.smooth(&m).unwrap();
        assert_eq!(smoothed.last(), run.filtered.last());
        for (s, f) in smoothed.iter().zip(&run.filtered) {
            assert!(s.covariance.trace() <= f.covariance.trace() + 1e-12);
        }
    }

    #[test]
    fn rts_scalar_two_steps_by_hand() {
        // x0 ~ N(0,1), x1 = x0 + w, w ~ N(0,1), y_k = x_k + v, v ~ N(0,1),
        // y0 = 1, y1 = 2.
        // Filter: x0|y0 ~ N(0.5, 0.5); prior x1 ~ N(0.5, 1.5);
        // x1|y0,y1: gain 1.5/2.5 = 0.6 -> mean 0.5 + 0.6*1.5 = 1.4, var 0.6.
        // Smoother: G = 0.5/1.5 = 1/3; mean 0.5 + (1.4-0.5)/3 = 0.8;
        // var 0.5 + (0.6-1.5)/9 = 0.4.
        let model = LinearGaussianModel::new(
            "scalar",
            m1(1.0),
            m1(1.0),
            m1(1.0),
            m1(1.0),
            Vector::zeros(1),
            m1(1.0),
        )
        .unwrap();
        let ys = [Vector::from_element(1, 1.0), Vector::from_element(1, 2.0)];
        let run = run_filter(&model, &ys).unwrap();
        assert!((run.filtered[1].mean[0] - 1.4).abs() < 1e-14);
        let s = run.smooth(&model).unwrap();
        assert!((s[0].mean[0] - 0.8).abs() < 1e-14);
        assert!((s[0].covariance[(0, 0)] - 0.4).abs() < 1e-14);
    }

    #[test]
    fn dimension_checks() {
        let b = scalar(0.0, 1.0);
        assert!(kf_predict(&Matrix::identity(2, 2), &Matrix::identity(2, 2), &b).is_err());
        assert!(kf_update(&m1(1.0), &m1(1.0), &b, &Vector::zeros(2)).is_err());
    }
}
