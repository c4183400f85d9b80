use super::{kalman_filter, positions_to_obs, LgssmParams};
use crate::error::Result;
use crate::numerics::logsumexp;

/// `log π_k + log p(a | z = k)` for every component.
pub fn mixture_log_likelihoods(params: &LgssmParams, positions: &[[f64; 2]], mask: &[bool]) -> Result<Vec<f64>> {
    params.validate()?;
    let obs = positions_to_obs(positions);
    (0..params.num_components())
        .map(|k| {
            let model = params.state_space(k)?;
            let ll = kalman_filter(&model, &obs, mask)?.log_likelihood;
            Ok(params.components[k].weight.ln() + ll)
        })
        .collect()
}

/// `p(z = k | a)` over the observed steps, normalized in log-space.
pub fn mixture_posterior(params: &LgssmParams, positions: &[[f64; 2]], mask: &[bool]) -> Result<Vec<f64>> {
    let joint = mixture_log_likelihoods(params, positions, mask)?;
    let norm = logsumexp(&joint);
    Ok(joint.iter().map(|l| (l - norm).exp()).collect())
}

/// `Σ_n log Σ_k π_k p(a^n | z^n = k)` for fully observed trajectories.
pub fn log_marginal(params: &LgssmParams, trajectories: &[Vec<[f64; 2]>]) -> Result<f64> {
    trajectories
        .iter()
        .map(|a| Ok(logsumexp(&mixture_log_likelihoods(params, a, &vec![true; a.len()])?)))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lgssm::tests::simple_params;
    use proptest::prelude::*;

    #[test]
    fn single_component_is_certain() {
        let p = simple_params(0.01, 1);
        let post = mixture_posterior(&p, &[[0.2, 0.1], [0.3, 0.2]], &[true, true]).unwrap();
        assert_eq!(post, vec![1.0]);
    }

    #[test]
    fn identical_components_split_evenly() {
        let mut p = simple_params(0.01, 2);
        p.components[1] = p.components[0].clone();
        let post = mixture_posterior(&p, &[[0.2, 0.1], [0.3, 0.2]], &[true, true]).unwrap();
        assert!((post[0] - 0.5).abs() < 1e-15 && (post[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn long_sequences_do_not_underflow() {
        let p = simple_params(0.01, 2);
        let far: Vec<[f64; 2]> = (0..200).map(|t| [1e3 + t as f64, -1e3]).collect();
        let post = mixture_posterior(&p, &far, &vec![true; far.len()]).unwrap();
        assert!(post.iter().all(|v| v.is_finite()));
        assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_mixture_equals_filter_likelihood() {
        let p = simple_params(0.01, 1);
        let a = vec![[0.2, 0.1], [0.3, 0.2], [0.35, 0.22]];
        let lm = log_marginal(&p, &[a.clone()]).unwrap();
        let model = p.state_space(0).unwrap();
        let ll = kalman_filter(&model, &positions_to_obs(&a), &[true; 3]).unwrap().log_likelihood;
        assert!((lm - ll).abs() < 1e-12);
    }

    #[test]
    fn objects_factorize() {
        let p = simple_params(0.01, 2);
        let a = vec![[0.2, 0.1], [0.3, 0.2]];
        let b = vec![[1.2, 0.4], [1.1, 0.3]];
        let joint = log_marginal(&p, &[a.clone(), b.clone()]).unwrap();
        let split = log_marginal(&p, &[a.clone()]).unwrap() + log_marginal(&p, &[b.clone()]).unwrap();
        assert!((joint - split).abs() < 1e-12);
        let swapped = log_marginal(&p, &[b, a]).unwrap();
        assert!((joint - swapped).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn posterior_sums_to_one(w in 0.01f64..0.99, xs in proptest::collection::vec(-3.0f64..3.0, 6)) {
            let mut p = simple_params(0.01, 2);
            p.components[0].weight = w;
            p.components[1].weight = 1.0 - w;
            let a: Vec<[f64; 2]> = xs.chunks(2).map(|c| [c[0], c[1]]).collect();
            let post = mixture_posterior(&p, &a, &[true, false, true]).unwrap();
            prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
