//! Linear Gaussian state-space dynamics for one object.
//!
//! The latent state `h = (x, y, ẋ, ẏ)` evolves under a Newtonian transition
//! `A = [I, δI; 0, I]` with constant force `u`; positions are read out with
//! `B = [I, 0]`. The initial state is drawn from a K-component Gaussian
//! mixture. All exact inference (filtering, smoothing, mixture posteriors,
//! marginal likelihoods) lives in f64 here; [`learnable`] holds the
//! differentiable counterpart used during training.

mod filter;
pub mod learnable;
mod mixture;
mod sample;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub use filter::{kalman_filter, rts_smooth, FilterOutput};
pub use learnable::{LgssmLearnable, LgssmVars};
pub use mixture::{log_marginal, mixture_log_likelihoods, mixture_posterior};
pub use sample::{sample_mvn, sample_trajectory};

pub const STATE_DIM: usize = 4;
pub const OBS_DIM: usize = 2;

/// Tolerances for accepting a covariance as symmetric PSD.
const SYMMETRY_TOL: f64 = 1e-12;
const EIGEN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// A generic time-invariant linear Gaussian model:
/// `h_1 ~ N(m0, P0)`, `h_t = F h_{t-1} + u + w`, `y_t = C h_t + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub transition: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub emission: DMatrix<f64>,
    pub transition_cov: DMatrix<f64>,
    pub emission_cov: DMatrix<f64>,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
}

impl StateSpace {
    pub fn state_dim(&self) -> usize {
        self.transition.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.emission.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.obs_dim();
        let dims_ok = self.transition.ncols() == n
            && self.offset.len() == n
            && self.emission.ncols() == n
            && self.transition_cov.shape() == (n, n)
            && self.emission_cov.shape() == (m, m)
            && self.init_mean.len() == n
            && self.init_cov.shape() == (n, n);
        if !dims_ok {
            return Err(Error::Shape("state-space dimensions are inconsistent".into()));
        }
        check_psd("transition noise", &self.transition_cov)?;
        check_psd("emission noise", &self.emission_cov)?;
        check_psd("initial state", &self.init_cov)?;
        Ok(())
    }

    /// Prior belief for the state at the first time-step.
    pub fn initial_belief(&self) -> GaussianBelief {
        GaussianBelief::new(self.init_mean.clone(), self.init_cov.clone())
    }

    /// One transition step applied to a belief.
    pub fn predict(&self, belief: &GaussianBelief) -> GaussianBelief {
        let f = &self.transition;
        let mean = f * &belief.mean + &self.offset;
        let cov = symmetrize(f * &belief.cov * f.transpose() + &self.transition_cov);
        GaussianBelief::new(mean, cov)
    }
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

pub fn check_psd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPsd(name.to_string()));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > SYMMETRY_TOL * scale {
        return Err(Error::NotPsd(name.to_string()));
    }
    let eig = symmetrize(m.clone()).symmetric_eigenvalues();
    if eig.iter().any(|&l| l < -EIGEN_TOL * scale) {
        return Err(Error::NotPsd(name.to_string()));
    }
    Ok(())
}

/// Newtonian LGSSM with a Gaussian-mixture initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct LgssmParams {
    pub delta: f64,
    pub force: DVector<f64>,
    pub sigma_h: DMatrix<f64>,
    pub sigma_a: DMatrix<f64>,
    pub components: Vec<MixtureComponent>,
}

impl LgssmParams {
    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// `[I, δI; 0, I]`.
    pub fn transition(&self) -> DMatrix<f64> {
        transition_matrix(self.delta)
    }

    /// `[I, 0]`.
    pub fn emission(&self) -> DMatrix<f64> {
        emission_matrix()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.delta.is_finite() {
            return Err(Error::NonFinite("sampling period".into()));
        }
        if self.force.len() != STATE_DIM
            || self.sigma_h.shape() != (STATE_DIM, STATE_DIM)
            || self.sigma_a.shape() != (OBS_DIM, OBS_DIM)
        {
            return Err(Error::Shape("LGSSM parameter dimensions".into()));
        }
        if self.components.is_empty() {
            return Err(Error::InvalidArgument("mixture prior needs at least one component".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if self.components.iter().any(|c| !(c.weight >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("mixture weights must lie on the simplex".into()));
        }
        check_psd("transition noise", &self.sigma_h)?;
        check_psd("emission noise", &self.sigma_a)?;
        for (k, c) in self.components.iter().enumerate() {
            if c.mean.len() != STATE_DIM || c.cov.shape() != (STATE_DIM, STATE_DIM) {
                return Err(Error::Shape(format!("mixture component {k}")));
            }
            check_psd(&format!("mixture component {k}"), &c.cov)?;
        }
        Ok(())
    }

    /// The linear Gaussian model obtained by conditioning on component `k`.
    pub fn state_space(&self, k: usize) -> Result<StateSpace> {
        let c = self.components.get(k).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "component {k} out of range for K={}",
                self.components.len()
            ))
        })?;
        Ok(StateSpace {
            transition: self.transition(),
            offset: self.force.clone(),
            emission: self.emission(),
            transition_cov: self.sigma_h.clone(),
            emission_cov: self.sigma_a.clone(),
            init_mean: c.mean.clone(),
            init_cov: c.cov.clone(),
        })
    }

    /// Roll a belief mean forward `steps` times without noise and read out
    /// the position means.
    pub fn forward_generate(&self, belief: &GaussianBelief, steps: usize) -> Result<Vec<[f64; 2]>> {
        if steps == 0 {
            return Err(Error::InvalidArgument("forward generation needs at least one step".into()));
        }
        if belief.mean.len() != STATE_DIM {
            return Err(Error::Shape("belief mean must be 4-dimensional".into()));
        }
        let a = self.transition();
        let mut m = belief.mean.clone();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            m = &a * &m + &self.force;
            out.push([m[0], m[1]]);
        }
        Ok(out)
    }

    /// Smoothed position means for every step, treating unmasked steps as
    /// missing observations.
    pub fn interpolate_missing(&self, positions: &[[f64; 2]], mask: &[bool], k: usize) -> Result<Vec<[f64; 2]>> {
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument("interpolation needs at least one observed step".into()));
        }
        let model = self.state_space(k)?;
        let obs = positions_to_obs(positions);
        let out = kalman_filter(&model, &obs, mask)?;
        let smoothed = rts_smooth(&model, &out.filtered, &out.predicted)?;
        Ok(smoothed.iter().map(|b| [b.mean[0], b.mean[1]]).collect())
    }
}

pub fn transition_matrix(delta: f64) -> DMatrix<f64> {
    let mut a = DMatrix::identity(STATE_DIM, STATE_DIM);
    a[(0, 2)] = delta;
    a[(1, 3)] = delta;
    a
}

pub fn emission_matrix() -> DMatrix<f64> {
    let mut b = DMatrix::zeros(OBS_DIM, STATE_DIM);
    b[(0, 0)] = 1.0;
    b[(1, 1)] = 1.0;
    b
}

pub fn positions_to_obs(positions: &[[f64; 2]]) -> Vec<DVector<f64>> {
    positions.iter().map(|p| DVector::from_row_slice(p)).collect()
}

/// One object's latent states and noisy positions over `T` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub h: Vec<[f64; 4]>,
    pub a: Vec<[f64; 2]>,
    pub component: Option<usize>,
    pub mask: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn simple_params(sigma_h: f64, k: usize) -> LgssmParams {
        LgssmParams {
            delta: 0.1,
            force: DVector::from_row_slice(&[0.0, -0.01, 0.0, -0.1]),
            sigma_h: DMatrix::identity(4, 4) * sigma_h,
            sigma_a: DMatrix::identity(2, 2) * 0.05,
            components: (0..k)
                .map(|i| MixtureComponent {
                    weight: 1.0 / k as f64,
                    mean: DVector::from_row_slice(&[i as f64, 0.5, 1.0, 0.0]),
                    cov: DMatrix::identity(4, 4) * 0.5,
                })
                .collect(),
        }
    }

    #[test]
    fn transition_has_newtonian_blocks() {
        let a = transition_matrix(0.25);
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[1., 0., 0.25, 0., 0., 1., 0., 0.25, 0., 0., 1., 0., 0., 0., 0., 1.],
        );
        assert_eq!(a, expected);
        assert_eq!(emission_matrix(), DMatrix::from_row_slice(2, 4, &[1., 0., 0., 0., 0., 1., 0., 0.]));
    }

    #[test]
    fn validation_rejects_bad_mixtures_and_covariances() {
        let mut p = simple_params(0.01, 2);
        assert!(p.validate().is_ok());
        p.components[0].weight = 0.9;
        assert!(p.validate().is_err());
        let mut p = simple_params(0.01, 2);
        p.sigma_a[(0, 0)] = -1.0;
        assert!(matches!(p.validate(), Err(Error::NotPsd(_))));
        let mut p = simple_params(0.01, 1);
        p.sigma_h[(0, 1)] = 0.3;
        assert!(matches!(p.validate(), Err(Error::NotPsd(_))));
    }

    #[test]
    fn one_step_rollout() {
        let p = simple_params(0.0, 1);
        let m = DVector::from_row_slice(&[1.0, 2.0, 3.0, 4.0]);
        let belief = GaussianBelief::new(m.clone(), DMatrix::identity(4, 4));
        let out = p.forward_generate(&belief, 1).unwrap();
        let expected = p.emission() * (p.transition() * &m + &p.force);
        assert_eq!(out, vec![[expected[0], expected[1]]]);
    }

    #[test]
    fn statics_without_force_or_velocity() {
        let mut p = simple_params(0.0, 1);
        p.force = DVector::zeros(4);
        let belief = GaussianBelief::new(DVector::from_row_slice(&[1.5, -0.5, 0.0, 0.0]), DMatrix::zeros(4, 4));
        let out = p.forward_generate(&belief, 10).unwrap();
        assert!(out.iter().all(|&q| q == [1.5, -0.5]));
        assert!(p.forward_generate(&belief, 0).is_err());
    }

    #[test]
    fn forward_generation_matches_smoothed_means_without_future_evidence() {
        // With zero transition noise the smoothed means after the last
        // observation follow the noise-free rollout of the filtered mean.
        let p = simple_params(0.0, 1);
        let model = p.state_space(0).unwrap();
        let positions = [[0.1, 0.4], [0.2, 0.45], [0.33, 0.48], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        let mask = [true, true, true, false, false, false];
        let out = kalman_filter(&model, &positions_to_obs(&positions), &mask).unwrap();
        let smoothed = rts_smooth(&model, &out.filtered, &out.predicted).unwrap();
        let gen = p.forward_generate(&out.filtered[2], 3).unwrap();
        for (i, q) in gen.iter().enumerate() {
            assert!((q[0] - smoothed[3 + i].mean[0]).abs() < 1e-10);
            assert!((q[1] - smoothed[3 + i].mean[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn interpolation_requires_an_observation() {
        let p = simple_params(0.01, 1);
        assert!(p.interpolate_missing(&[[0.0, 0.0]; 3], &[false; 3], 0).is_err());
        assert!(p.interpolate_missing(&[[0.0, 0.0]; 3], &[true; 3], 1).is_err());
    }

    #[test]
    fn interpolation_with_full_mask_is_the_smoother() {
        let p = simple_params(0.02, 1);
        let positions = [[0.1, 0.4], [0.2, 0.45], [0.33, 0.48], [0.41, 0.44]];
        let mask = [true; 4];
        let model = p.state_space(0).unwrap();
        let out = kalman_filter(&model, &positions_to_obs(&positions), &mask).unwrap();
        let smoothed = rts_smooth(&model, &out.filtered, &out.predicted).unwrap();
        let interp = p.interpolate_missing(&positions, &mask, 0).unwrap();
        for (q, s) in interp.iter().zip(&smoothed) {
            assert_eq!(*q, [s.mean[0], s.mean[1]]);
        }
    }
}
