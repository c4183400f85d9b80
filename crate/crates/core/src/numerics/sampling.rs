//! Reparametrized Gaussian sampling.

use rand::Rng;
use rand_distr::StandardNormal;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Standard-normal noise of the given shape.
pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Weight matrix drawn from `N(0, 1/√d)` where `d` is the element count.
pub fn init_weight(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let std = 1.0 / ((rows * cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// `mean + std ∘ noise`, differentiable with respect to `mean` and `std`.
pub fn gaussian_sample(g: &mut Graph, mean: Var, std: Var, noise: Var) -> Result<Var> {
    if let Some(bad) = g.value(std).data().iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(format!("standard deviation must be positive, got {bad}")));
    }
    if g.shape(noise) != g.shape(mean) {
        return Err(Error::Shape(format!(
            "noise {:?} does not match mean {:?}",
            g.shape(noise),
            g.shape(mean)
        )));
    }
    let scaled = g.mul(std, noise)?;
    g.add(mean, scaled)
}
