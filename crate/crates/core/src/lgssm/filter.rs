use nalgebra::{DMatrix, DVector};

use super::{symmetrize, GaussianBelief, StateSpace};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// `p(h_t | y_{1:t})` over observed steps.
    pub filtered: Vec<GaussianBelief>,
    /// `p(h_t | y_{1:t-1})`; the first entry is the initial prior.
    pub predicted: Vec<GaussianBelief>,
    /// `log p(y_observed)`.
    pub log_likelihood: f64,
}

/// Forward Kalman recursion with Joseph-form covariance updates.
///
/// Steps with `mask[t] == false` skip the measurement update, which
/// marginalizes the missing observation exactly.
pub fn kalman_filter(model: &StateSpace, obs: &[DVector<f64>], mask: &[bool]) -> Result<FilterOutput> {
    model.validate()?;
    if obs.len() != mask.len() {
        return Err(Error::Shape(format!("{} observations but {} mask entries", obs.len(), mask.len())));
    }
    let n = model.state_dim();
    let m = model.obs_dim();
    let c = &model.emission;
    let r = &model.emission_cov;
    let eye = DMatrix::<f64>::identity(n, n);

    let mut filtered = Vec::with_capacity(obs.len());
    let mut predicted = Vec::with_capacity(obs.len());
    let mut log_likelihood = 0.0;

    for (t, (y, &observed)) in obs.iter().zip(mask).enumerate() {
        let prior = match filtered.last() {
            None => model.initial_belief(),
            Some(prev) => model.predict(prev),
        };
        if !observed {
            predicted.push(prior.clone());
            filtered.push(prior);
            continue;
        }
        if y.len() != m {
            return Err(Error::Shape(format!("observation {t} has dimension {}", y.len())));
        }
        let innovation = y - c * &prior.mean;
        let s = symmetrize(c * &prior.cov * c.transpose() + r);
        let chol = s.clone().cholesky().ok_or(Error::SingularInnovation(t + 1))?;
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::SingularInnovation(t + 1));
        }
        let s_inv_e = chol.solve(&innovation);
        // K = P Cᵀ S⁻¹ = (S⁻¹ C P)ᵀ for symmetric S and P.
        let gain = chol.solve(&(c * &prior.cov)).transpose();
        let mean = &prior.mean + &gain * &innovation;
        let ikc = &eye - &gain * c;
        let cov = symmetrize(&ikc * &prior.cov * ikc.transpose() + &gain * r * gain.transpose());
        log_likelihood -= 0.5 * (m as f64 * LN_2PI + log_det + innovation.dot(&s_inv_e));
        predicted.push(prior);
        filtered.push(GaussianBelief::new(mean, cov));
    }
    Ok(FilterOutput { filtered, predicted, log_likelihood })
}

/// Solve `x · p = b` for symmetric PSD `p`, falling back to a
/// pseudo-inverse when `p` is singular.
fn right_solve_psd(b: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    match p.clone().cholesky() {
        Some(chol) => chol.solve(&b.transpose()).transpose(),
        None => {
            let pinv = p.clone().pseudo_inverse(1e-13).expect("SVD of a finite matrix");
            b * pinv
        }
    }
}

/// Rauch-Tung-Striebel backward pass over the output of [`kalman_filter`].
pub fn rts_smooth(
    model: &StateSpace,
    filtered: &[GaussianBelief],
    predicted: &[GaussianBelief],
) -> Result<Vec<GaussianBelief>> {
    if filtered.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} filtered beliefs but {} predicted beliefs",
            filtered.len(),
            predicted.len()
        )));
    }
    let Some(last) = filtered.last() else {
        return Ok(Vec::new());
    };
    let f = &model.transition;
    let mut smoothed = vec![last.clone(); filtered.len()];
    for t in (0..filtered.len() - 1).rev() {
        let cur = &filtered[t];
        let next_pred = &predicted[t + 1];
        let next_smooth = &smoothed[t + 1];
        let gain = right_solve_psd(&(&cur.cov * f.transpose()), &next_pred.cov);
        let mean = &cur.mean + &gain * (&next_smooth.mean - &next_pred.mean);
        let cov = symmetrize(&cur.cov + &gain * (&next_smooth.cov - &next_pred.cov) * gain.transpose());
        smoothed[t] = GaussianBelief::new(mean, cov);
    }
    Ok(smoothed)
}
