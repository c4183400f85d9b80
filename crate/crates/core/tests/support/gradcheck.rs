//! Finite-difference check of the end-to-end ELBO gradient on a tiny model.

use pixeldyn_core::numerics::{Graph, Tensor};
use pixeldyn_core::trainer::{bind_model, elbo_graph, images_tensor, initialize, Model, ModelDims, Noise};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEPS: usize = 3;
const PIXELS: usize = 16;

/// Relative error with an absolute floor of 1e-4 on the denominator.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn tiny_model(seed: u64) -> Model {
    let dims = ModelDims { pixels: PIXELS, state_dim: 8, canvas_dim: 8, components: 2, object_counts: vec![1] };
    let mut model = initialize(seed, &dims).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in model.renderer.tensors_mut().into_iter().chain(model.inference.tensors_mut()) {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    model
}

fn loss_and_grads(model: &Model, frames: &[Vec<f64>], noise: &Noise, beta: f64) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let vars = bind_model(&mut g, model, true, true);
    let images = g.constant(images_tensor(&[frames]).unwrap());
    let nodes = elbo_graph(&mut g, &vars, images, STEPS, 1, 1, std::slice::from_ref(noise), beta).unwrap();
    let total = g.sum(nodes.elbo);
    let grads = g.backward(total).unwrap();
    let all: Vec<_> = vars.lgssm.all().into_iter().chain(vars.renderer.all()).chain(vars.inference.all()).collect();
    let out = all.iter().map(|&v| grads.get_or_zeros(v, g.shape(v))).collect();
    (g.value(total).item(), out)
}

fn tensors_mut(model: &mut Model) -> Vec<&mut Tensor> {
    let mut v = model.lgssm.tensors_mut();
    v.extend(model.renderer.tensors_mut());
    v.extend(model.inference.tensors_mut());
    v
}

/// Worst relative error over every parameter entry of the tiny model.
pub fn worst_gradient_error(seed: u64) -> f64 {
    let model = tiny_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let frames: Vec<Vec<f64>> = (0..STEPS).map(|_| (0..PIXELS).map(|_| rng.gen_range(0..2) as f64).collect()).collect();
    let noise: Noise = (0..STEPS).map(|_| vec![Tensor::from_fn(1, 2, |_, _| rng.gen_range(-1.5..1.5))]).collect();
    let beta = 1.0;
    let (_, grads) = loss_and_grads(&model, &frames, &noise, beta);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, grad) in grads.iter().enumerate() {
        for j in 0..grad.len() {
            let mut plus = model.clone();
            tensors_mut(&mut plus)[i].data_mut()[j] += h;
            let mut minus = model.clone();
            tensors_mut(&mut minus)[i].data_mut()[j] -= h;
            let fd = (loss_and_grads(&plus, &frames, &noise, beta).0 - loss_and_grads(&minus, &frames, &noise, beta).0)
                / (2.0 * h);
            worst = worst.max(rel_err(grad.data()[j], fd));
        }
    }
    worst
}
