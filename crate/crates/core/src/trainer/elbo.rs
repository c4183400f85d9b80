use super::model::Model;
use crate::error::{Error, Result};
use crate::inference_net::{infer_graph, log_q_graph, InferenceVars};
use crate::lgssm::learnable::log_marginal_graph;
use crate::lgssm::LgssmVars;
use crate::numerics::{gaussian_sample, Graph, Tensor, Var};
use crate::renderer::{bernoulli_log_likelihood_graph, render_graph, RendererVars};

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub lgssm: LgssmVars,
    pub renderer: RendererVars,
    pub inference: InferenceVars,
}

pub fn bind_model(g: &mut Graph, model: &Model, train_lgssm: bool, train_networks: bool) -> ModelVars {
    ModelVars {
        lgssm: model.lgssm.bind(g, train_lgssm),
        renderer: model.renderer.bind(g, train_networks),
        inference: model.inference.bind(g, train_networks),
    }
}

/// Standard-normal draws for one Monte-Carlo sample, `[t][n]`, each `rows × 2`.
pub type Noise = Vec<Vec<Tensor>>;

/// Per-sequence terms of the bound, each `rows × 1`, averaged over draws.
#[derive(Debug, Clone, Copy)]
pub struct ElboNodes {
    pub elbo: Var,
    pub recon: Var,
    pub log_q: Var,
    pub log_prior: Var,
}

/// Stack frames time-major: row `t·B + b` holds frame `t` of sequence `b`.
pub fn images_tensor(sequences: &[&[Vec<f64>]]) -> Result<Tensor> {
    let rows = sequences.len();
    let steps = sequences.first().map_or(0, |s| s.len());
    let pixels = sequences.first().and_then(|s| s.first()).map_or(0, |f| f.len());
    let mut data = Vec::with_capacity(rows * steps * pixels);
    for t in 0..steps {
        for s in sequences {
            let f = s.get(t).filter(|f| f.len() == pixels && s.len() == steps);
            data.extend_from_slice(f.ok_or_else(|| Error::Shape("sequences in a batch must share T and P".into()))?);
        }
    }
    Tensor::new(steps * rows, pixels, data)
}

/// `recon − β·(log q − log p)` at reparametrized samples `a = μ + σ∘ε`.
pub fn elbo_graph(
    g: &mut Graph,
    vars: &ModelVars,
    images: Var,
    steps: usize,
    rows: usize,
    n_objects: usize,
    draws: &[Noise],
    beta: f64,
) -> Result<ElboNodes> {
    if draws.is_empty() {
        return Err(Error::InvalidArgument("at least one noise draw is required".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("KL weight must be positive, got {beta}")));
    }
    let post = infer_graph(g, &vars.inference, images, steps, rows, n_objects, None)?;
    let flat_means: Vec<Var> = post.means.iter().flatten().copied().collect();
    let flat_stds: Vec<Var> = post.stds.iter().flatten().copied().collect();
    let mask = vec![true; steps];
    // Sums the T row blocks of a (T·rows) × 1 column into rows × 1.
    let fold = g.constant(Tensor::from_fn(rows, steps * rows, |b, j| if j % rows == b { 1.0 } else { 0.0 }));

    let mut acc: Option<[Var; 3]> = None;
    for noise in draws {
        if noise.len() != steps || noise.iter().any(|r| r.len() != n_objects) {
            return Err(Error::Shape(format!("noise must be {steps} x {n_objects} blocks")));
        }
        let mut a = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut row = Vec::with_capacity(n_objects);
            for n in 0..n_objects {
                let e = g.constant(noise[t][n].clone());
                row.push(gaussian_sample(g, post.means[t][n], post.stds[t][n], e)?);
            }
            a.push(row);
        }
        let mut per_object = Vec::with_capacity(n_objects);
        for n in 0..n_objects {
            let column: Vec<Var> = a.iter().map(|r| r[n]).collect();
            per_object.push(g.concat_rows(&column)?);
        }
        let probs = render_graph(g, &vars.renderer, &per_object)?;
        let ll = bernoulli_log_likelihood_graph(g, probs, images)?;
        let recon = g.matmul(fold, ll)?;

        let flat_a: Vec<Var> = a.iter().flatten().copied().collect();
        let lq = log_q_graph(g, &flat_means, &flat_stds, &flat_a)?;
        let mut lp = None;
        for n in 0..n_objects {
            let column: Vec<Var> = a.iter().map(|r| r[n]).collect();
            let term = log_marginal_graph(g, &vars.lgssm, &column, &mask)?;
            lp = Some(match lp {
                None => term,
                Some(s) => g.add(s, term)?,
            });
        }
        let lp = lp.expect("at least one object");
        acc = Some(match acc {
            None => [recon, lq, lp],
            Some([r, q, p]) => [g.add(r, recon)?, g.add(q, lq)?, g.add(p, lp)?],
        });
    }
    let inv = 1.0 / draws.len() as f64;
    let [r, q, p] = acc.expect("non-empty draws");
    let recon = g.scale(r, inv);
    let log_q = g.scale(q, inv);
    let log_prior = g.scale(p, inv);
    let kl = g.sub(log_q, log_prior)?;
    let weighted = g.scale(kl, beta);
    let elbo = g.sub(recon, weighted)?;
    Ok(ElboNodes { elbo, recon, log_q, log_prior })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboValue {
    pub elbo: f64,
    pub recon: f64,
    pub log_q: f64,
    pub log_prior: f64,
}

/// Bound for one sequence; `draws[m][t][n]` is the standard-normal noise of draw `m`.
pub fn elbo(
    model: &Model,
    frames: &[Vec<f64>],
    n_objects: usize,
    draws: &[Vec<Vec<[f64; 2]>>],
    beta: f64,
) -> Result<ElboValue> {
    let mut g = Graph::new();
    let vars = bind_model(&mut g, model, false, false);
    let images = g.constant(images_tensor(&[frames])?);
    let noise: Vec<Noise> = draws
        .iter()
        .map(|d| d.iter().map(|r| r.iter().map(|e| Tensor::row(e)).collect()).collect())
        .collect();
    let nodes = elbo_graph(&mut g, &vars, images, frames.len(), 1, n_objects, &noise, beta)?;
    Ok(ElboValue {
        elbo: g.value(nodes.elbo).item(),
        recon: g.value(nodes.recon).item(),
        log_q: g.value(nodes.log_q).item(),
        log_prior: g.value(nodes.log_prior).item(),
    })
}
