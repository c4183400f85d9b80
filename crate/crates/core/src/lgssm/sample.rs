use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{LgssmParams, Trajectory};
use crate::error::{Error, Result};

/// Draw from `N(mean, cov)` for a PSD (possibly singular) covariance.
pub fn sample_mvn(rng: &mut impl Rng, mean: &DVector<f64>, cov: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    if cov.iter().all(|&v| v == 0.0) {
        return mean.clone();
    }
    let factor = match cov.clone().cholesky() {
        Some(chol) => chol.l(),
        None => {
            let eig = super::symmetrize(cov.clone()).symmetric_eigen();
            let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
            &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
        }
    };
    mean + factor * z
}

/// Draw a trajectory of length `steps`; the component is sampled from the
/// mixture weights unless given.
pub fn sample_trajectory(
    params: &LgssmParams,
    steps: usize,
    rng: &mut impl Rng,
    component: Option<usize>,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::InvalidArgument("trajectory length must be at least 1".into()));
    }
    params.validate()?;
    let k = match component {
        Some(k) if k < params.num_components() => k,
        Some(k) => return Err(Error::InvalidArgument(format!("component {k} out of range"))),
        None => {
            let weights: Vec<f64> = params.components.iter().map(|c| c.weight).collect();
            WeightedIndex::new(&weights)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?
                .sample(rng)
        }
    };
    let a_mat = params.transition();
    let b_mat = params.emission();
    let zero2 = DVector::zeros(2);
    let zero4 = DVector::zeros(4);
    let c = &params.components[k];
    let mut h = sample_mvn(rng, &c.mean, &c.cov);
    let mut hs = Vec::with_capacity(steps);
    let mut as_ = Vec::with_capacity(steps);
    for t in 0..steps {
        if t > 0 {
            h = &a_mat * &h + &params.force + sample_mvn(rng, &zero4, &params.sigma_h);
        }
        let a = &b_mat * &h + sample_mvn(rng, &zero2, &params.sigma_a);
        hs.push([h[0], h[1], h[2], h[3]]);
        as_.push([a[0], a[1]]);
    }
    Ok(Trajectory { h: hs, a: as_, component: Some(k), mask: vec![true; steps] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lgssm::tests::simple_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noise_free_trajectory_has_constant_acceleration() {
        let mut p = simple_params(0.0, 1);
        p.sigma_a = DMatrix::zeros(2, 2);
        p.components[0].cov = DMatrix::zeros(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tr = sample_trajectory(&p, 12, &mut rng, None).unwrap();
        // y'' = δ·u_ẏ + u_y - u_y = δ·u_ẏ per step for a constant force.
        let expected = [p.delta * p.force[2], p.delta * p.force[3]];
        for t in 1..11 {
            for d in 0..2 {
                let second = tr.h[t + 1][d] - 2.0 * tr.h[t][d] + tr.h[t - 1][d];
                assert!((second - expected[d]).abs() < 1e-12);
            }
        }
        assert_eq!(tr.h.iter().map(|h| [h[0], h[1]]).collect::<Vec<_>>(), tr.a);
    }

    #[test]
    fn initial_state_mean_matches_mixture_mean() {
        let mut p = simple_params(0.0, 2);
        p.components[0].weight = 0.3;
        p.components[1].weight = 0.7;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sum = DVector::<f64>::zeros(4);
        for _ in 0..n {
            let tr = sample_trajectory(&p, 1, &mut rng, None).unwrap();
            sum += DVector::from_row_slice(&tr.h[0]);
        }
        let mean = sum / n as f64;
        let expected = &p.components[0].mean * 0.3 + &p.components[1].mean * 0.7;
        // per-coordinate std of the mixture: within-component variance plus
        // between-component spread.
        for d in 0..4 {
            let between: f64 = p
                .components
                .iter()
                .map(|c| c.weight * (c.mean[d] - expected[d]).powi(2))
                .sum();
            let sd = (0.5 + between).sqrt();
            assert!((mean[d] - expected[d]).abs() < 3.0 * sd / (n as f64).sqrt(), "coordinate {d}");
        }
    }

    #[test]
    fn single_step_emission_uses_the_first_state() {
        let p = simple_params(0.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let mut resid = [0.0f64; 2];
        for _ in 0..n {
            let tr = sample_trajectory(&p, 1, &mut rng, Some(0)).unwrap();
            for d in 0..2 {
                resid[d] += (tr.a[0][d] - tr.h[0][d]).powi(2);
            }
        }
        for r in resid {
            assert!((r / n as f64 - 0.05).abs() < 0.05 * 0.05);
        }
        assert!(sample_trajectory(&p, 0, &mut rng, None).is_err());
    }
}
