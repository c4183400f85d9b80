use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{anneal, TrainConfig};
use super::elbo::{bind_model, elbo_graph, images_tensor, Noise};
use super::model::{Model, ModelCheckpoint};
use super::sampler::Sampler;
use crate::dataset::Corpus;
use crate::error::{Error, Result};
use crate::numerics::{clip_global_norm, standard_normal, AdamConfig, AdamState, Graph, Tensor};

/// Batch means of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub beta: f64,
}

pub enum TrainEvent<'a> {
    Step(&'a LossRecord),
    Checkpoint(&'a ModelCheckpoint),
}

fn check_compatible(model: &Model, corpus: &Corpus) -> Result<()> {
    if corpus.sequences.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    if model.renderer.pixels() != corpus.pixels() {
        return Err(Error::InvalidArgument(format!(
            "model expects {} pixels, corpus has {}",
            model.renderer.pixels(),
            corpus.pixels()
        )));
    }
    for n in corpus.object_counts() {
        if !model.inference.s0.contains_key(&n) {
            return Err(Error::InvalidArgument(format!("model has no initial state for {n} objects")));
        }
    }
    Ok(())
}

fn all_finite(grads: &[Tensor]) -> bool {
    grads.iter().all(Tensor::is_finite)
}

/// Optimize from `start` up to `config.iterations` total iterations.
///
/// Adam moments start fresh, so resuming from a saved checkpoint is not
/// bit-identical to an uninterrupted run.
pub fn train(
    config: &TrainConfig,
    start: ModelCheckpoint,
    corpus: &Corpus,
    mut observer: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<ModelCheckpoint> {
    config.validate()?;
    let ModelCheckpoint { mut model, iteration: first, mut history } = start;
    if first >= config.iterations {
        return Ok(ModelCheckpoint { model, iteration: first, history });
    }
    check_compatible(&model, corpus)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut sampler = Sampler::new(corpus, &mut rng);
    let frames: Vec<Vec<Vec<f64>>> = corpus.sequences.iter().map(|s| s.frames_f64()).collect();
    let adam = AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() };
    let shapes = |ts: Vec<(String, &Tensor)>| ts.iter().map(|(_, t)| t.shape()).collect::<Vec<_>>();
    let mut opt_lgssm = AdamState::new(adam.clone(), &shapes(model.lgssm.named_tensors()));
    let mut opt_renderer = AdamState::new(adam.clone(), &shapes(model.renderer.named_tensors()));
    let mut opt_inference = AdamState::new(adam, &shapes(model.inference.named_tensors()));
    let steps = corpus.steps;
    let rows = config.batch_size;

    for iteration in first..config.iterations {
        let beta = anneal(iteration, config);
        let train_lgssm = iteration >= config.freeze_iterations;
        let (n_objects, batch) = sampler.next(&mut rng, rows);
        let draws: Vec<Noise> = (0..config.samples)
            .map(|_| (0..steps).map(|_| (0..n_objects).map(|_| standard_normal(&mut rng, rows, 2)).collect()).collect())
            .collect();

        let mut g = Graph::new();
        let vars = bind_model(&mut g, &model, train_lgssm, true);
        let seqs: Vec<&[Vec<f64>]> = batch.iter().map(|&i| frames[i].as_slice()).collect();
        let images = g.constant(images_tensor(&seqs)?);
        let nodes = elbo_graph(&mut g, &vars, images, steps, rows, n_objects, &draws, beta).map_err(|e| {
            Error::Diverged { iteration, reason: e.to_string() }
        })?;
        let total = g.sum(nodes.elbo);
        let loss = g.scale(total, -1.0 / rows as f64);
        let mean = |v| g.value(v).sum() / rows as f64;
        let record = LossRecord {
            iteration,
            elbo: mean(nodes.elbo),
            recon: mean(nodes.recon),
            kl: mean(nodes.log_q) - mean(nodes.log_prior),
            beta,
        };
        if !g.value(loss).item().is_finite() {
            return Err(Error::Diverged { iteration, reason: format!("loss is {}", g.value(loss).item()) });
        }
        let grads = g.backward(loss)?;
        let collect = |vs: Vec<crate::numerics::Var>| -> Vec<Tensor> {
            vs.into_iter().map(|v| grads.get_or_zeros(v, g.shape(v))).collect()
        };
        let mut all = if train_lgssm { collect(vars.lgssm.all()) } else { Vec::new() };
        let n_lgssm = all.len();
        all.extend(collect(vars.renderer.all()));
        let n_renderer = all.len() - n_lgssm;
        all.extend(collect(vars.inference.all()));
        drop(g);
        if !all_finite(&all) {
            return Err(Error::Diverged { iteration, reason: "non-finite gradient".into() });
        }
        if config.clip_gradients {
            clip_global_norm(&mut all, config.clip_norm);
        }
        let g_inference = all.split_off(n_lgssm + n_renderer);
        let g_renderer = all.split_off(n_lgssm);
        if train_lgssm {
            opt_lgssm.step(&mut model.lgssm.tensors_mut(), &all)?;
        }
        opt_renderer.step(&mut model.renderer.tensors_mut(), &g_renderer)?;
        opt_inference.step(&mut model.inference.tensors_mut(), &g_inference)?;

        observer(TrainEvent::Step(&record))?;
        history.push(record);
        let done = iteration + 1;
        if config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 && done < config.iterations {
            let ck = ModelCheckpoint { model: model.clone(), iteration: done, history: history.clone() };
            observer(TrainEvent::Checkpoint(&ck))?;
        }
    }
    Ok(ModelCheckpoint { model, iteration: config.iterations, history })
}
