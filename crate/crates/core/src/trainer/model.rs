use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::train::LossRecord;
use crate::container;
use crate::error::{Error, Result};
use crate::inference_net::InferenceParams;
use crate::lgssm::{LgssmLearnable, LgssmParams, MixtureComponent};
use crate::numerics::Tensor;
use crate::renderer::RendererParams;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub pixels: usize,
    pub state_dim: usize,
    pub canvas_dim: usize,
    pub components: usize,
    pub object_counts: Vec<usize>,
}

/// Generative parameters θ (LGSSM and renderer) with inference parameters φ.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub lgssm: LgssmLearnable,
    pub renderer: RendererParams,
    pub inference: InferenceParams,
}

impl Model {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            pixels: self.renderer.pixels(),
            state_dim: self.inference.state_dim(),
            canvas_dim: self.renderer.canvas_dim(),
            components: self.lgssm.num_components(),
            object_counts: self.inference.object_counts(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.lgssm.named_tensors();
        v.extend(self.renderer.named_tensors());
        v.extend(self.inference.named_tensors());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// `δ = 0.1`, `u = 0`, `Σ_H = 0.001 I`, `Σ_A = I`, uniform weights, unit
/// prior covariances, prior position means from a standard normal and zero
/// velocities.
pub fn initial_lgssm(rng: &mut ChaCha8Rng, components: usize) -> LgssmParams {
    LgssmParams {
        delta: 0.1,
        force: DVector::zeros(4),
        sigma_h: DMatrix::identity(4, 4) * 0.001,
        sigma_a: DMatrix::identity(2, 2),
        components: (0..components)
            .map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                let y: f64 = StandardNormal.sample(rng);
                MixtureComponent {
                    weight: 1.0 / components as f64,
                    mean: DVector::from_row_slice(&[x, y, 0.0, 0.0]),
                    cov: DMatrix::identity(4, 4),
                }
            })
            .collect(),
    }
}

pub fn initialize(seed: u64, dims: &ModelDims) -> Result<Model> {
    if dims.pixels == 0 || dims.state_dim == 0 || dims.canvas_dim == 0 || dims.components == 0 {
        return Err(Error::InvalidArgument("model dimensions must be positive".into()));
    }
    if dims.object_counts.is_empty() || dims.object_counts.contains(&0) {
        return Err(Error::InvalidArgument("object counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lgssm = LgssmLearnable::from_params(&initial_lgssm(&mut rng, dims.components))?;
    let renderer = RendererParams::init(&mut rng, dims.canvas_dim, dims.pixels);
    let inference = InferenceParams::init(&mut rng, dims.state_dim, dims.pixels, &dims.object_counts);
    Ok(Model { lgssm, renderer, inference })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub iteration: usize,
    pub history: Vec<LossRecord>,
}

const ITERATION_BLOCK: &str = "meta/iteration";
const HISTORY_BLOCK: &str = "meta/history";
const S0_PREFIX: &str = "inference/s0/";

impl ModelCheckpoint {
    pub fn new(model: Model) -> Self {
        Self { model, iteration: 0, history: Vec::new() }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let iteration = Tensor::scalar(self.iteration as f64);
        let history = (!self.history.is_empty()).then(|| {
            Tensor::from_fn(self.history.len(), 5, |i, j| {
                let r = &self.history[i];
                [r.iteration as f64, r.elbo, r.recon, r.kl, r.beta][j]
            })
        });
        let mut blocks = self.model.named_tensors();
        blocks.push((ITERATION_BLOCK.to_string(), &iteration));
        if let Some(h) = &history {
            blocks.push((HISTORY_BLOCK.to_string(), h));
        }
        container::encode(&blocks)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let blocks = container::decode(bytes)?;
        let mut counts: Vec<usize> = blocks
            .names()
            .iter()
            .filter_map(|n| n.strip_prefix(S0_PREFIX))
            .map(|n| n.parse().map_err(|_| Error::Format(format!("bad initial-state block '{S0_PREFIX}{n}'"))))
            .collect::<Result<_>>()?;
        counts.sort_unstable();
        let get = |n: &str| blocks.get(n);
        let model = Model {
            lgssm: LgssmLearnable::from_named(get)?,
            renderer: RendererParams::from_named(get)?,
            inference: InferenceParams::from_named(&counts, get)?,
        };
        if model.renderer.pixels() != model.inference.pixels() {
            return Err(Error::Format("renderer and inference network disagree on the image size".into()));
        }
        let iteration = blocks.get(ITERATION_BLOCK)?.item() as usize;
        let history = if blocks.contains(HISTORY_BLOCK) {
            let h = blocks.get(HISTORY_BLOCK)?;
            if h.cols() != 5 {
                return Err(Error::Format("loss history must have 5 columns".into()));
            }
            (0..h.rows())
                .map(|i| {
                    let r = h.row_slice(i);
                    LossRecord { iteration: r[0] as usize, elbo: r[1], recon: r[2], kl: r[3], beta: r[4] }
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self { model, iteration, history })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dims() -> ModelDims {
        ModelDims { pixels: 16, state_dim: 8, canvas_dim: 8, components: 2, object_counts: vec![1, 2] }
    }

    #[test]
    fn lgssm_starts_from_the_smooth_prior() {
        let m = initialize(3, &tiny_dims()).unwrap();
        let p = m.lgssm.to_params();
        assert!((p.delta - 0.1).abs() < 1e-15);
        assert!(p.force.iter().all(|&v| v == 0.0));
        assert!((&p.sigma_h - DMatrix::identity(4, 4) * 0.001).amax() < 1e-12);
        assert!((&p.sigma_a - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
        for c in &p.components {
            assert!((&c.cov - DMatrix::<f64>::identity(4, 4)).amax() < 1e-12);
            assert!((c.weight - 0.5).abs() < 1e-15);
            assert_eq!((c.mean[2], c.mean[3]), (0.0, 0.0));
        }
    }

    #[test]
    fn biases_start_at_zero() {
        let m = initialize(4, &tiny_dims()).unwrap();
        for (name, t) in m.named_tensors() {
            if name.contains("/b_") || name.ends_with("theta_x0") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn weight_std_is_inverse_root_of_size() {
        let dims = ModelDims { pixels: 10_000, state_dim: 4, canvas_dim: 1, components: 1, object_counts: vec![1] };
        let m = initialize(5, &dims).unwrap();
        let w = &m.renderer.w_v;
        assert_eq!(w.len(), 10_000);
        let mean = w.sum() / 1e4;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (1e4 - 1.0);
        assert!((var.sqrt() * 100.0 - 1.0).abs() < 0.05, "{}", var.sqrt());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = initialize(6, &tiny_dims()).unwrap();
        let ck = ModelCheckpoint {
            model,
            iteration: 42,
            history: vec![LossRecord { iteration: 41, elbo: -3.5, recon: -1.0, kl: 0.25, beta: 100.0 }],
        };
        let bytes = ck.encode().unwrap();
        let back = ModelCheckpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), bytes);
        assert_eq!(back.model.dims(), tiny_dims());

        let fresh = ModelCheckpoint::new(back.model.clone());
        assert_eq!(ModelCheckpoint::decode(&fresh.encode().unwrap()).unwrap(), fresh);

        let mut bad = bytes.clone();
        bad[bytes.len() / 2] ^= 1;
        assert!(ModelCheckpoint::decode(&bad).is_err());
    }
}
