//! Brute-force joint-Gaussian reference for linear Gaussian state-space
//! models. Every latent state and observation is written as an explicit
//! affine function of independent standard-normal noises, so the joint
//! mean and covariance come from a single matrix product, without any
//! filtering algebra.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pixeldyn_core::lgssm::{LgssmParams, MixtureComponent, StateSpace};
use rand::Rng;

pub struct Joint {
    pub state_dim: usize,
    pub obs_dim: usize,
    pub steps: usize,
    /// Mean of `[h_1, ..., h_T, y_1, ..., y_T]`.
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = ((m + m.transpose()) * 0.5).symmetric_eigen();
    let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s)
}

pub fn joint(model: &StateSpace, steps: usize) -> Joint {
    let n = model.transition.nrows();
    let m = model.emission.nrows();
    let z = n * steps + m * steps;
    let l0 = psd_sqrt(&model.init_cov);
    let lq = psd_sqrt(&model.transition_cov);
    let lr = psd_sqrt(&model.emission_cov);

    let mut h_mean = Vec::with_capacity(steps);
    let mut h_map: Vec<DMatrix<f64>> = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut noise = DMatrix::zeros(n, z);
        noise.view_mut((0, t * n), (n, n)).copy_from(if t == 0 { &l0 } else { &lq });
        if t == 0 {
            h_mean.push(model.init_mean.clone());
            h_map.push(noise);
        } else {
            h_mean.push(&model.transition * &h_mean[t - 1] + &model.offset);
            h_map.push(&model.transition * &h_map[t - 1] + noise);
        }
    }
    let total = (n + m) * steps;
    let mut mean = DVector::zeros(total);
    let mut map = DMatrix::zeros(total, z);
    for t in 0..steps {
        mean.rows_mut(t * n, n).copy_from(&h_mean[t]);
        map.view_mut((t * n, 0), (n, z)).copy_from(&h_map[t]);
        let y_row = n * steps + t * m;
        mean.rows_mut(y_row, m).copy_from(&(&model.emission * &h_mean[t]));
        let mut y_map = &model.emission * &h_map[t];
        let mut noise_block = y_map.view_mut((0, n * steps + t * m), (m, m));
        noise_block += &lr;
        map.view_mut((y_row, 0), (m, z)).copy_from(&y_map);
    }
    let cov = &map * map.transpose();
    Joint { state_dim: n, obs_dim: m, steps, mean, cov }
}

impl Joint {
    fn obs_indices(&self, mask: &[bool]) -> Vec<usize> {
        let base = self.state_dim * self.steps;
        mask.iter()
            .enumerate()
            .filter(|(_, &o)| o)
            .flat_map(|(t, _)| (0..self.obs_dim).map(move |d| base + t * self.obs_dim + d))
            .collect()
    }

    fn stack(obs: &[DVector<f64>], mask: &[bool]) -> DVector<f64> {
        let vals: Vec<f64> = obs
            .iter()
            .zip(mask)
            .filter(|(_, &o)| o)
            .flat_map(|(y, _)| y.iter().copied().collect::<Vec<_>>())
            .collect();
        DVector::from_vec(vals)
    }

    /// `log p(y_observed)`.
    pub fn log_likelihood(&self, obs: &[DVector<f64>], mask: &[bool]) -> f64 {
        let idx = self.obs_indices(mask);
        if idx.is_empty() {
            return 0.0;
        }
        let y = Self::stack(obs, mask);
        let mu = self.mean.select_rows(&idx);
        let c = self.cov.select_rows(&idx).select_columns(&idx);
        let chol = c.cholesky().expect("observation covariance must be positive definite");
        let d = &y - &mu;
        let quad = d.dot(&chol.solve(&d));
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (idx.len() as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
    }

    /// `p(h_t | y_observed)` for every `t`.
    pub fn conditionals(&self, obs: &[DVector<f64>], mask: &[bool]) -> Vec<(DVector<f64>, DMatrix<f64>)> {
        let n = self.state_dim;
        let idx = self.obs_indices(mask);
        (0..self.steps)
            .map(|t| {
                let hi: Vec<usize> = (t * n..(t + 1) * n).collect();
                let mh = self.mean.select_rows(&hi);
                let chh = self.cov.select_rows(&hi).select_columns(&hi);
                if idx.is_empty() {
                    return (mh, chh);
                }
                let y = Self::stack(obs, mask);
                let ma = self.mean.select_rows(&idx);
                let caa = self.cov.select_rows(&idx).select_columns(&idx);
                let cha = self.cov.select_rows(&hi).select_columns(&idx);
                let caa_inv = caa.try_inverse().expect("invertible observation covariance");
                let mean = &mh + &cha * &caa_inv * (&y - &ma);
                let cov = &chh - &cha * &caa_inv * cha.transpose();
                (mean, cov)
            })
            .collect()
    }
}

pub fn random_psd(rng: &mut impl Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.7..0.7));
    &l * l.transpose() + DMatrix::identity(n, n) * floor
}

pub fn random_params(rng: &mut impl Rng, k: usize) -> LgssmParams {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    LgssmParams {
        delta: rng.gen_range(0.05..0.5),
        force: DVector::from_fn(4, |_, _| rng.gen_range(-0.3..0.3)),
        sigma_h: random_psd(rng, 4, 0.01),
        sigma_a: random_psd(rng, 2, 0.05),
        components: raw
            .iter()
            .map(|w| MixtureComponent {
                weight: w / total,
                mean: DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0)),
                cov: random_psd(rng, 4, 0.05),
            })
            .collect(),
    }
}

pub fn random_positions(rng: &mut impl Rng, steps: usize) -> Vec<[f64; 2]> {
    (0..steps).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect()
}

/// Direct Bayes over components using the joint-Gaussian likelihoods.
pub fn mixture_posterior(params: &LgssmParams, positions: &[[f64; 2]], mask: &[bool]) -> Vec<f64> {
    let obs: Vec<DVector<f64>> = positions.iter().map(|p| DVector::from_row_slice(p)).collect();
    let joint_ll: Vec<f64> = (0..params.components.len())
        .map(|k| {
            let model = params.state_space(k).unwrap();
            joint(&model, positions.len()).log_likelihood(&obs, mask).exp() * params.components[k].weight
        })
        .collect();
    let total: f64 = joint_ll.iter().sum();
    joint_ll.iter().map(|v| v / total).collect()
}
