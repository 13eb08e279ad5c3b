use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::{Detection, Error, Result};

/// Gaussian belief over `[t, t_dot]` at one channel: arrival time (s) and
/// its derivative along the direction of travel (s/m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateEstimate {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub channel: usize,
}

impl StateEstimate {
    pub fn new(mean: [f64; 2], cov: [[f64; 2]; 2], channel: usize) -> Self {
        Self {
            mean: Vector2::new(mean[0], mean[1]),
            cov: Matrix2::new(cov[0][0], cov[0][1], cov[1][0], cov[1][1]),
            channel,
        }
    }

    pub fn time(&self) -> f64 {
        self.mean[0]
    }

    pub fn slowness(&self) -> f64 {
        self.mean[1]
    }

    pub fn time_std(&self) -> f64 {
        self.cov[(0, 0)].max(0.0).sqrt()
    }

    fn check(&self) -> Result<()> {
        let c = &self.cov;
        if !(self.mean.iter().all(|v| v.is_finite()) && c.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidArgument("non-finite state".into()));
        }
        if c[(0, 0)] < -1e-10 || c[(1, 1)] < -1e-10 || (c[(0, 1)] - c[(1, 0)]).abs() > 1e-10 * (1.0 + c.abs().max()) {
            return Err(Error::InvalidArgument("state covariance is not symmetric PSD".into()));
        }
        Ok(())
    }
}

/// How the innovation variance combines the prediction and the measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnovationForm {
    /// `C P C^T + sigma_z^2`.
    #[default]
    Variance,
    /// `C P C^T + sigma_z`, adding the standard deviation instead of the
    /// variance. Kept for comparison only.
    LiteralStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionModel {
    /// Std of the arrival time's second derivative (s/m^2).
    pub sigma_tddot: f64,
    /// Std of arrival-time measurements (s).
    pub sigma_z: f64,
    #[serde(default)]
    pub innovation: InnovationForm,
}

impl Default for MotionModel {
    fn default() -> Self {
        Self { sigma_tddot: 0.005, sigma_z: 0.05, innovation: InnovationForm::Variance }
    }
}

impl MotionModel {
    pub fn new(sigma_tddot: f64, sigma_z: f64) -> Result<Self> {
        let m = Self { sigma_tddot, sigma_z, innovation: InnovationForm::Variance };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_tddot > 0.0 && self.sigma_z > 0.0 && self.sigma_tddot.is_finite() && self.sigma_z.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_tddot and sigma_z must be positive, got {} and {}",
                self.sigma_tddot, self.sigma_z
            )));
        }
        Ok(())
    }

    /// Variance added to `C P C^T` to form the innovation variance.
    pub fn measurement_variance(&self) -> f64 {
        match self.innovation {
            InnovationForm::Variance => self.sigma_z * self.sigma_z,
            InnovationForm::LiteralStd => self.sigma_z,
        }
    }

    pub fn transition(dx: f64) -> Matrix2<f64> {
        Matrix2::new(1.0, dx, 0.0, 1.0)
    }

    pub fn process_noise(&self, dx: f64) -> Matrix2<f64> {
        let q = self.sigma_tddot * self.sigma_tddot;
        Matrix2::new(dx.powi(4) / 4.0, dx.powi(3) / 2.0, dx.powi(3) / 2.0, dx * dx) * q
    }
}

fn symmetrize(m: Matrix2<f64>) -> Matrix2<f64> {
    (m + m.transpose()) * 0.5
}

/// Propagate the belief `dx` metres along the chain.
pub fn predict(state: &StateEstimate, dx: f64, model: &MotionModel) -> Result<StateEstimate> {
    if !(dx > 0.0 && dx.is_finite()) {
        return Err(Error::InvalidArgument(format!("channel spacing must be positive, got {dx}")));
    }
    state.check()?;
    let a = MotionModel::transition(dx);
    Ok(StateEstimate {
        mean: a * state.mean,
        cov: symmetrize(a * state.cov * a.transpose() + model.process_noise(dx)),
        channel: state.channel,
    })
}

/// Standard deviation of the predicted measurement.
pub fn innovation_std(pred: &StateEstimate, model: &MotionModel) -> f64 {
    (pred.cov[(0, 0)] + model.measurement_variance()).max(0.0).sqrt()
}

/// Index of the candidate most likely under the predicted arrival time, or
/// `None` when there is none inside `gate_sigmas` innovation deviations.
pub fn associate(pred: &StateEstimate, candidates: &[Detection], model: &MotionModel, gate_sigmas: f64) -> Option<usize> {
    let gate = gate_sigmas * innovation_std(pred, model);
    let t = pred.time();
    candidates
        .iter()
        .enumerate()
        .map(|(i, d)| (i, (d.arrival_time_s - t).abs()))
        .filter(|&(_, r)| r <= gate)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

/// Kalman measurement update with arrival time `z`.
pub fn update(pred: &StateEstimate, z: f64, model: &MotionModel) -> Result<StateEstimate> {
    pred.check()?;
    let r = model.measurement_variance();
    let s = pred.cov[(0, 0)] + r;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::InvalidArgument(format!("innovation variance {s} is not positive")));
    }
    let k = pred.cov.column(0) / s;
    let innovation = z - pred.mean[0];
    // Joseph form keeps the covariance PSD under round-off.
    let ikc = Matrix2::identity() - Matrix2::new(k[0], 0.0, k[1], 0.0);
    let cov = ikc * pred.cov * ikc.transpose() + k * k.transpose() * r;
    Ok(StateEstimate { mean: pred.mean + k * innovation, cov: symmetrize(cov), channel: pred.channel })
}

/// Result of the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub states: Vec<StateEstimate>,
    /// Steps whose predicted covariance had to be regularized before inversion.
    pub regularized: Vec<usize>,
}

/// Rauch-Tung-Striebel backward pass over filtered states. `dxs[k]` is the
/// spacing from node `k` to node `k + 1`.
pub fn rts_smooth(filtered: &[StateEstimate], model: &MotionModel, dxs: &[f64]) -> Result<Smoothed> {
    let n = filtered.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot smooth an empty chain".into()));
    }
    if dxs.len() + 1 != n {
        return Err(Error::InvalidArgument(format!("{} spacings for {n} states", dxs.len())));
    }
    let mut states = filtered.to_vec();
    let mut regularized = Vec::new();
    for k in (0..n - 1).rev() {
        let f = &filtered[k];
        let pred = predict(f, dxs[k], model)?;
        let a = MotionModel::transition(dxs[k]);
        let inv = match pred.cov.try_inverse().filter(|_| pred.cov.determinant() > 1e-300) {
            Some(inv) => inv,
            None => {
                regularized.push(k);
                let eps = (1e-12 * pred.cov.trace().abs()).max(1e-30);
                (pred.cov + Matrix2::identity() * eps)
                    .try_inverse()
                    .ok_or_else(|| Error::Data(format!("predicted covariance at step {k} is not invertible")))?
            }
        };
        let g = f.cov * a.transpose() * inv;
        let next = states[k + 1];
        let mean = f.mean + g * (next.mean - pred.mean);
        let cov = symmetrize(f.cov + g * (next.cov - pred.cov) * g.transpose());
        states[k] = StateEstimate { mean, cov, channel: f.channel };
    }
    Ok(Smoothed { states, regularized })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Polarity;

    fn det(t: f64) -> Detection {
        Detection { channel: 0, arrival_time_s: t, prominence: 1.0, polarity: Polarity::Peak }
    }

    #[test]
    fn deterministic_prediction() {
        let model = MotionModel { sigma_tddot: 0.0, sigma_z: 0.1, innovation: InnovationForm::Variance };
        let s = StateEstimate::new([10.0, 0.1], [[0.0, 0.0], [0.0, 0.0]], 0);
        let p = predict(&s, 2.0, &model).unwrap();
        assert!((p.mean[0] - 10.2).abs() < 1e-12 && (p.mean[1] - 0.1).abs() < 1e-12);
        assert_eq!(p.cov, Matrix2::zeros());
    }

    #[test]
    fn process_noise_at_unit_spacing() {
        let model = MotionModel { sigma_tddot: 1.0, sigma_z: 0.1, innovation: InnovationForm::Variance };
        let s = StateEstimate::new([0.0, 0.1], [[0.0, 0.0], [0.0, 0.0]], 0);
        let p = predict(&s, 1.0, &model).unwrap();
        assert_eq!(p.cov, Matrix2::new(0.25, 0.5, 0.5, 1.0));
    }

    #[test]
    fn non_positive_spacing_is_rejected() {
        let s = StateEstimate::new([0.0, 0.1], [[1.0, 0.0], [0.0, 1.0]], 0);
        assert!(predict(&s, 0.0, &MotionModel::default()).is_err());
        assert!(predict(&s, -1.0, &MotionModel::default()).is_err());
    }

    #[test]
    fn association_picks_nearest_inside_gate() {
        let model = MotionModel::default();
        let pred = StateEstimate::new([5.2, 0.1], [[1.0, 0.0], [0.0, 0.01]], 0);
        assert_eq!(associate(&pred, &[det(5.0), det(9.0)], &model, 3.0), Some(0));
        assert_eq!(associate(&pred, &[], &model, 3.0), None);
        // s = 0.01 exactly: zero prior variance plus sigma_z = 0.01.
        let tight = MotionModel { sigma_tddot: 0.005, sigma_z: 0.01, innovation: InnovationForm::Variance };
        let sharp = StateEstimate::new([5.2, 0.1], [[0.0, 0.0], [0.0, 0.01]], 0);
        assert_eq!(associate(&sharp, &[det(5.0)], &tight, 3.0), None);
    }

    #[test]
    fn update_limits() {
        let pred = StateEstimate::new([3.0, 0.1], [[1.0, 0.0], [0.0, 1.0]], 0);
        let vague = MotionModel { sigma_tddot: 0.01, sigma_z: 1e12, innovation: InnovationForm::Variance };
        assert!((update(&pred, 100.0, &vague).unwrap().mean[0] - 3.0).abs() < 1e-6);
        let sharp = MotionModel { sigma_tddot: 0.01, sigma_z: 1e-12, innovation: InnovationForm::Variance };
        assert!((update(&pred, 7.5, &sharp).unwrap().mean[0] - 7.5).abs() < 1e-9);
    }

    #[test]
    fn literal_form_adds_the_standard_deviation() {
        let pred = StateEstimate::new([0.0, 0.1], [[0.04, 0.0], [0.0, 1.0]], 0);
        let m = MotionModel { sigma_tddot: 0.01, sigma_z: 0.05, innovation: InnovationForm::LiteralStd };
        assert!((innovation_std(&pred, &m) - (0.04f64 + 0.05).sqrt()).abs() < 1e-15);
        let gain = update(&pred, 1.0, &m).unwrap().mean[0];
        assert!((gain - 0.04 / 0.09).abs() < 1e-12);
    }

    #[test]
    fn smoothing_keeps_last_state_and_shrinks_uncertainty() {
        let model = MotionModel::default();
        let mut f = vec![update(&StateEstimate::new([0.0, 0.1], [[1.0, 0.0], [0.0, 0.0025]], 0), 0.02, &model).unwrap()];
        let dxs = vec![1.0; 9];
        for k in 1..10 {
            let p = predict(&f[k - 1], 1.0, &model).unwrap();
            f.push(update(&p, 0.1 * k as f64, &model).unwrap());
        }
        let s = rts_smooth(&f, &model, &dxs).unwrap();
        assert_eq!(s.states[9], f[9]);
        for (a, b) in s.states.iter().zip(&f) {
            assert!(a.cov.trace() <= b.cov.trace() + 1e-12);
        }
        assert!(s.regularized.is_empty());
    }

    #[test]
    fn singular_prediction_is_regularized() {
        let model = MotionModel { sigma_tddot: 1e-300, sigma_z: 0.05, innovation: InnovationForm::Variance };
        let f = vec![StateEstimate::new([0.0, 0.1], [[0.0, 0.0], [0.0, 0.0]], 0); 3];
        let s = rts_smooth(&f, &model, &[1.0, 1.0]).unwrap();
        assert_eq!(s.regularized, vec![1, 0]);
        assert!(s.states.iter().all(|x| x.mean.iter().all(|v| v.is_finite())));
    }
}
