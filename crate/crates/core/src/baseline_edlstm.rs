//! Encoder-decoder LSTM baseline for multi-step frame generation.
//!
//! ```text
//! e_t = relu(W^e v_{t-1} + b^e)
//! [i, f, o, g] = W^g [e_t, σ_{t-1}] + b^g
//! c_t = sigm(f) ∘ c_{t-1} + sigm(i) ∘ tanh(g)
//! σ_t = sigm(o) ∘ tanh(c_t)
//! v̂_t = sigm(W^d σ_t + b^d)
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::dataset::Corpus;
use crate::error::{Error, Result};
use crate::eval::{GenerationRecord, OBSERVED};
use crate::numerics::{clip_global_norm, init_weight, AdamConfig, AdamState, Graph, Tensor, Var};
use crate::renderer::{bernoulli_log_likelihood_graph, log_likelihood_image};
use crate::trainer::sampler::Sampler;
use crate::trainer::{images_tensor, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct EdLstmParams {
    pub w_enc: Tensor,
    pub b_enc: Tensor,
    pub w_gates: Tensor,
    pub b_gates: Tensor,
    pub w_dec: Tensor,
    pub b_dec: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct EdLstmVars {
    pub w_enc: Var,
    pub b_enc: Var,
    pub w_gates: Var,
    pub b_gates: Var,
    pub w_dec: Var,
    pub b_dec: Var,
}

impl EdLstmVars {
    pub fn all(&self) -> Vec<Var> {
        vec![self.w_enc, self.b_enc, self.w_gates, self.b_gates, self.w_dec, self.b_dec]
    }
}

const NAMES: [&str; 6] = ["w_enc", "b_enc", "w_gates", "b_gates", "w_dec", "b_dec"];

impl EdLstmParams {
    pub fn zeros(pixels: usize, encoder_dim: usize, state_dim: usize) -> Self {
        Self {
            w_enc: Tensor::zeros(encoder_dim, pixels),
            b_enc: Tensor::zeros(1, encoder_dim),
            w_gates: Tensor::zeros(4 * state_dim, encoder_dim + state_dim),
            b_gates: Tensor::zeros(1, 4 * state_dim),
            w_dec: Tensor::zeros(pixels, state_dim),
            b_dec: Tensor::zeros(1, pixels),
        }
    }

    /// Weights from `N(0, 1/√d)` per matrix, zero biases.
    pub fn init(rng: &mut impl Rng, pixels: usize, encoder_dim: usize, state_dim: usize) -> Self {
        Self {
            w_enc: init_weight(rng, encoder_dim, pixels),
            w_gates: init_weight(rng, 4 * state_dim, encoder_dim + state_dim),
            w_dec: init_weight(rng, pixels, state_dim),
            ..Self::zeros(pixels, encoder_dim, state_dim)
        }
    }

    pub fn pixels(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn encoder_dim(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.w_dec.cols()
    }

    fn tensors(&self) -> [&Tensor; 6] {
        [&self.w_enc, &self.b_enc, &self.w_gates, &self.b_gates, &self.w_dec, &self.b_dec]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_enc, &mut self.b_enc, &mut self.w_gates, &mut self.b_gates, &mut self.w_dec, &mut self.b_dec]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        NAMES.iter().zip(self.tensors()).map(|(n, t)| (format!("edlstm/{n}"), t)).collect()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let expect = Self::zeros(self.pixels(), self.encoder_dim(), self.state_dim());
        for ((name, t), e) in NAMES.iter().zip(self.tensors()).zip(expect.tensors()) {
            if t.shape() != e.shape() {
                return Err(Error::Shape(format!("edlstm/{name} is {:?}, expected {:?}", t.shape(), e.shape())));
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EdLstmVars {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        EdLstmVars {
            w_enc: leaf(&self.w_enc),
            b_enc: leaf(&self.b_enc),
            w_gates: leaf(&self.w_gates),
            b_gates: leaf(&self.b_gates),
            w_dec: leaf(&self.w_dec),
            b_dec: leaf(&self.b_dec),
        }
    }
}

/// Hidden and cell state of a batch, each `rows × H`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

pub fn zero_state(g: &mut Graph, rows: usize, state_dim: usize) -> LstmState {
    LstmState { hidden: g.constant(Tensor::zeros(rows, state_dim)), cell: g.constant(Tensor::zeros(rows, state_dim)) }
}

/// One cell update on the previous frames `input` (`rows × P`); returns the
/// new state and the predicted next-frame probabilities.
pub fn step_graph(g: &mut Graph, vars: &EdLstmVars, state: LstmState, input: Var) -> Result<(LstmState, Var)> {
    let h = g.shape(state.hidden)[1];
    let e = g.matmul_t(input, vars.w_enc)?;
    let e = g.add(e, vars.b_enc)?;
    let e = g.relu(e);
    let joint = g.concat_cols(&[e, state.hidden])?;
    let gates = g.matmul_t(joint, vars.w_gates)?;
    let gates = g.add(gates, vars.b_gates)?;
    let gate = |g: &mut Graph, k: usize| g.slice_cols(gates, k * h, h);
    let (i, f, o, c_hat) = (gate(g, 0)?, gate(g, 1)?, gate(g, 2)?, gate(g, 3)?);
    let (i, f, o, c_hat) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o), g.tanh(c_hat));
    let kept = g.mul(f, state.cell)?;
    let added = g.mul(i, c_hat)?;
    let cell = g.add(kept, added)?;
    let squashed = g.tanh(cell);
    let hidden = g.mul(o, squashed)?;
    let logits = g.matmul_t(hidden, vars.w_dec)?;
    let logits = g.add(logits, vars.b_dec)?;
    Ok((LstmState { hidden, cell }, g.sigmoid(logits)))
}

fn check_frames(params: &EdLstmParams, frames: &[Vec<f64>]) -> Result<()> {
    for f in frames {
        if f.len() != params.pixels() {
            return Err(Error::Shape(format!("frame has {} pixels, expected {}", f.len(), params.pixels())));
        }
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("frame values must lie in [0, 1]".into()));
        }
    }
    Ok(())
}

/// Plain-value cell state for step-by-step use.
#[derive(Debug, Clone, PartialEq)]
pub struct EdLstmState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl EdLstmState {
    pub fn zeros(state_dim: usize) -> Self {
        Self { hidden: vec![0.0; state_dim], cell: vec![0.0; state_dim] }
    }
}

pub fn step(params: &EdLstmParams, state: &EdLstmState, input: &[f64]) -> Result<(EdLstmState, Vec<f64>)> {
    check_frames(params, std::slice::from_ref(&input.to_vec()))?;
    let h = params.state_dim();
    if state.hidden.len() != h || state.cell.len() != h {
        return Err(Error::Shape(format!("state must have dimension {h}")));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let s = LstmState {
        hidden: g.constant(Tensor::row(&state.hidden)),
        cell: g.constant(Tensor::row(&state.cell)),
    };
    let x = g.constant(Tensor::row(input));
    let (next, probs) = step_graph(&mut g, &vars, s, x)?;
    Ok((
        EdLstmState { hidden: g.value(next.hidden).data().to_vec(), cell: g.value(next.cell).data().to_vec() },
        g.value(probs).data().to_vec(),
    ))
}

/// Predictions of frames `2..=T` from ground-truth frames `1..T-1`.
pub fn teacher_forced(params: &EdLstmParams, frames: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_frames(params, frames)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let mut state = zero_state(&mut g, 1, params.state_dim());
    let mut out = Vec::with_capacity(frames.len().saturating_sub(1));
    for f in &frames[..frames.len().saturating_sub(1)] {
        let x = g.constant(Tensor::row(f));
        let (s, p) = step_graph(&mut g, &vars, state, x)?;
        state = s;
        out.push(g.value(p).data().to_vec());
    }
    Ok(out)
}

/// Feed the observed frames, then `horizon` predictions closed-loop on
/// probabilities. The first output predicts the frame after the last
/// observed one.
pub fn generate(params: &EdLstmParams, observed: &[Vec<f64>], horizon: usize) -> Result<Vec<Vec<f64>>> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("generation horizon must be positive".into()));
    }
    if observed.is_empty() {
        return Err(Error::InvalidArgument("at least one observed frame is required".into()));
    }
    check_frames(params, observed)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let mut state = zero_state(&mut g, 1, params.state_dim());
    let mut last = None;
    for f in observed {
        let x = g.constant(Tensor::row(f));
        let (s, p) = step_graph(&mut g, &vars, state, x)?;
        state = s;
        last = Some(p);
    }
    let mut out = Vec::with_capacity(horizon);
    let mut prediction = last.expect("non-empty");
    for k in 0..horizon {
        out.push(g.value(prediction).data().to_vec());
        if k + 1 < horizon {
            let x = g.constant(g.value(prediction).clone());
            let (s, p) = step_graph(&mut g, &vars, state, x)?;
            state = s;
            prediction = p;
        }
    }
    Ok(out)
}

/// Per-step, per-pixel NLL of frames `OBSERVED+1 ..= OBSERVED+horizon`.
pub fn generation_nll(params: &EdLstmParams, frames: &[Vec<u8>], horizon: usize) -> Result<Vec<f64>> {
    if OBSERVED + horizon > frames.len() {
        return Err(Error::InvalidArgument(format!(
            "{OBSERVED} observed plus {horizon} generated steps exceed the {} available frames",
            frames.len()
        )));
    }
    let observed: Vec<Vec<f64>> = frames[..OBSERVED].iter().map(|f| f.iter().map(|&v| v as f64).collect()).collect();
    let generated = generate(params, &observed, horizon)?;
    generated
        .iter()
        .zip(&frames[OBSERVED..])
        .map(|(p, f)| Ok(-log_likelihood_image(p, f)? / f.len() as f64))
        .collect()
}

pub fn generation_report(params: &EdLstmParams, corpus: &Corpus, horizon: usize) -> Result<Vec<GenerationRecord>> {
    use rayon::prelude::*;
    if params.pixels() != corpus.pixels() {
        return Err(Error::InvalidArgument("baseline and corpus disagree on the image size".into()));
    }
    corpus
        .sequences
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let nll = generation_nll(params, &seq.frames, horizon)?;
            Ok(GenerationRecord {
                task: "baseline",
                sequence: i,
                n_objects: seq.n_objects,
                mean_nll: nll.iter().sum::<f64>() / nll.len() as f64,
                nll,
                k_star: Vec::new(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdLstmConfig {
    pub encoder_dim: usize,
    pub state_dim: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub clip_gradients: bool,
    pub clip_norm: f64,
}

impl Default for EdLstmConfig {
    fn default() -> Self {
        Self::full48()
    }
}

impl EdLstmConfig {
    /// Optimizer settings and budget of a main-model training configuration.
    pub fn matching(train: &TrainConfig, encoder_dim: usize, state_dim: usize) -> Self {
        Self {
            encoder_dim,
            state_dim,
            batch_size: train.batch_size,
            iterations: train.iterations,
            learning_rate: train.learning_rate,
            seed: train.seed,
            clip_gradients: train.clip_gradients,
            clip_norm: train.clip_norm,
        }
    }

    pub fn full48() -> Self {
        Self::matching(&TrainConfig::full48(), 2048, 2048)
    }

    pub fn desk32() -> Self {
        Self::matching(&TrainConfig::desk32(), 256, 256)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full48" => Ok(Self::full48()),
            "desk32" => Ok(Self::desk32()),
            other => Err(Error::InvalidArgument(format!("unknown baseline preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_dim == 0 || self.state_dim == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("baseline dimensions and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || (self.clip_gradients && !(self.clip_norm > 0.0)) {
            return Err(Error::InvalidArgument("learning rate and clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Mean per-pixel teacher-forced NLL of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdLstmRecord {
    pub iteration: usize,
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdLstmCheckpoint {
    pub params: EdLstmParams,
    pub iteration: usize,
    pub history: Vec<EdLstmRecord>,
}

const ITERATION_BLOCK: &str = "meta/iteration";
const HISTORY_BLOCK: &str = "meta/history";

impl EdLstmCheckpoint {
    pub fn new(params: EdLstmParams) -> Self {
        Self { params, iteration: 0, history: Vec::new() }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let iteration = Tensor::scalar(self.iteration as f64);
        let history = (!self.history.is_empty()).then(|| {
            Tensor::from_fn(self.history.len(), 2, |i, j| {
                let r = &self.history[i];
                [r.iteration as f64, r.nll][j]
            })
        });
        let mut blocks = self.params.named_tensors();
        blocks.push((ITERATION_BLOCK.to_string(), &iteration));
        if let Some(h) = &history {
            blocks.push((HISTORY_BLOCK.to_string(), h));
        }
        container::encode(&blocks)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let blocks = container::decode(bytes)?;
        let get = |n: &str| blocks.get(&format!("edlstm/{n}"));
        let params = EdLstmParams {
            w_enc: get("w_enc")?,
            b_enc: get("b_enc")?,
            w_gates: get("w_gates")?,
            b_gates: get("b_gates")?,
            w_dec: get("w_dec")?,
            b_dec: get("b_dec")?,
        };
        params.check_shapes().map_err(|e| Error::Format(e.to_string()))?;
        let iteration = blocks.get(ITERATION_BLOCK)?.item() as usize;
        let history = if blocks.contains(HISTORY_BLOCK) {
            let h = blocks.get(HISTORY_BLOCK)?;
            if h.cols() != 2 {
                return Err(Error::Format("baseline history must have 2 columns".into()));
            }
            (0..h.rows()).map(|i| EdLstmRecord { iteration: h.get(i, 0) as usize, nll: h.get(i, 1) }).collect()
        } else {
            Vec::new()
        };
        Ok(Self { params, iteration, history })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub fn initialize(config: &EdLstmConfig, pixels: usize) -> EdLstmParams {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    EdLstmParams::init(&mut rng, pixels, config.encoder_dim, config.state_dim)
}

/// Sum over batch rows of the teacher-forced log-likelihood of frames `2..=T`.
fn batch_log_likelihood(g: &mut Graph, vars: &EdLstmVars, images: &Tensor, steps: usize, rows: usize, state_dim: usize) -> Result<Var> {
    let mut state = zero_state(g, rows, state_dim);
    let mut total = None;
    for t in 0..steps - 1 {
        let input = g.constant(images.rows_range(t * rows, rows));
        let target = g.constant(images.rows_range((t + 1) * rows, rows));
        let (s, probs) = step_graph(g, vars, state, input)?;
        state = s;
        let ll = bernoulli_log_likelihood_graph(g, probs, target)?;
        let ll = g.sum(ll);
        total = Some(match total {
            None => ll,
            Some(acc) => g.add(acc, ll)?,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("training needs at least two frames".into()))
}

/// Teacher-forced training up to `config.iterations`, batches bucketed by
/// object count like the main model.
pub fn train_edlstm(
    config: &EdLstmConfig,
    start: EdLstmCheckpoint,
    corpus: &Corpus,
    mut observer: impl FnMut(&EdLstmRecord) -> Result<()>,
) -> Result<EdLstmCheckpoint> {
    config.validate()?;
    let EdLstmCheckpoint { mut params, iteration: first, mut history } = start;
    if first >= config.iterations {
        return Ok(EdLstmCheckpoint { params, iteration: first, history });
    }
    if corpus.sequences.is_empty() || params.pixels() != corpus.pixels() {
        return Err(Error::InvalidArgument("baseline and corpus disagree on the image size, or corpus is empty".into()));
    }
    params.check_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut sampler = Sampler::new(corpus, &mut rng);
    let frames: Vec<Vec<Vec<f64>>> = corpus.sequences.iter().map(|s| s.frames_f64()).collect();
    let adam = AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() };
    let shapes: Vec<[usize; 2]> = params.tensors().iter().map(|t| t.shape()).collect();
    let mut opt = AdamState::new(adam, &shapes);
    let (steps, rows) = (corpus.steps, config.batch_size);
    let per_pixel = ((steps - 1) * corpus.pixels() * rows) as f64;

    for iteration in first..config.iterations {
        let (_, batch) = sampler.next(&mut rng, rows);
        let seqs: Vec<&[Vec<f64>]> = batch.iter().map(|&i| frames[i].as_slice()).collect();
        let images = images_tensor(&seqs)?;
        let mut g = Graph::new();
        let vars = params.bind(&mut g, true);
        let ll = batch_log_likelihood(&mut g, &vars, &images, steps, rows, params.state_dim())?;
        let loss = g.scale(ll, -1.0 / rows as f64);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { iteration, reason: format!("loss is {value}") });
        }
        let grads = g.backward(loss)?;
        let mut all: Vec<Tensor> = vars.all().into_iter().map(|v| grads.get_or_zeros(v, g.shape(v))).collect();
        drop(g);
        if !all.iter().all(Tensor::is_finite) {
            return Err(Error::Diverged { iteration, reason: "non-finite gradient".into() });
        }
        if config.clip_gradients {
            clip_global_norm(&mut all, config.clip_norm);
        }
        opt.step(&mut params.tensors_mut(), &all)?;
        let record = EdLstmRecord { iteration, nll: value * rows as f64 / per_pixel };
        observer(&record)?;
        history.push(record);
    }
    Ok(EdLstmCheckpoint { params, iteration: config.iterations, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate as generate_corpus, DatasetConfig};

    fn tiny(seed: u64) -> EdLstmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = EdLstmParams::init(&mut rng, 9, 4, 3);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        p
    }

    fn frames(seed: u64, steps: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..steps).map(|_| (0..9).map(|_| rng.gen_range(0..2) as f64).collect()).collect()
    }

    #[test]
    fn zero_weights_predict_one_half() {
        let p = EdLstmParams::zeros(9, 4, 3);
        let (s, probs) = step(&p, &EdLstmState::zeros(3), &[1.0; 9]).unwrap();
        assert!(probs.iter().all(|&v| v == 0.5));
        assert!(s.cell.iter().all(|&v| v == 0.0));
    }

    /// Direct evaluation of the cell equations.
    fn reference_step(p: &EdLstmParams, s: &EdLstmState, x: &[f64]) -> (EdLstmState, Vec<f64>) {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let affine = |w: &Tensor, b: &Tensor, x: &[f64]| -> Vec<f64> {
            (0..w.rows()).map(|i| b.get(0, i) + (0..w.cols()).map(|j| w.get(i, j) * x[j]).sum::<f64>()).collect()
        };
        let e: Vec<f64> = affine(&p.w_enc, &p.b_enc, x).into_iter().map(|v| v.max(0.0)).collect();
        let joint: Vec<f64> = e.iter().chain(&s.hidden).copied().collect();
        let z = affine(&p.w_gates, &p.b_gates, &joint);
        let h = s.hidden.len();
        let cell: Vec<f64> = (0..h).map(|k| sig(z[h + k]) * s.cell[k] + sig(z[k]) * z[3 * h + k].tanh()).collect();
        let hidden: Vec<f64> = (0..h).map(|k| sig(z[2 * h + k]) * cell[k].tanh()).collect();
        let probs = affine(&p.w_dec, &p.b_dec, &hidden).into_iter().map(sig).collect();
        (EdLstmState { hidden, cell }, probs)
    }

    #[test]
    fn step_matches_the_cell_equations() {
        let p = tiny(1);
        let f = frames(2, 3);
        let mut s = EdLstmState::zeros(3);
        let mut r = s.clone();
        for x in &f {
            let (ns, probs) = step(&p, &s, x).unwrap();
            let (nr, rp) = reference_step(&p, &r, x);
            for (a, b) in probs.iter().zip(&rp).chain(ns.cell.iter().zip(&nr.cell)) {
                assert!((a - b).abs() < 1e-12);
            }
            s = ns;
            r = nr;
        }
        assert_eq!(step(&p, &EdLstmState::zeros(3), &f[0]).unwrap(), step(&p, &EdLstmState::zeros(3), &f[0]).unwrap());
    }

    #[test]
    fn generation_warms_up_then_runs_closed_loop() {
        let p = tiny(3);
        let f = frames(4, 8);
        let tf = teacher_forced(&p, &f).unwrap();
        let one = generate(&p, &f[..5], 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0], tf[4]);
        let many = generate(&p, &f[..5], 4).unwrap();
        assert_eq!(many[0], one[0]);
        let mut s = EdLstmState::zeros(3);
        let mut pred = Vec::new();
        for x in &f[..5] {
            let (ns, pr) = step(&p, &s, x).unwrap();
            s = ns;
            pred = pr;
        }
        let (_, second) = step(&p, &s, &pred).unwrap();
        for (a, b) in many[1].iter().zip(&second) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(many.iter().flatten().all(|&v| v > 0.0 && v < 1.0));
        assert!(generate(&p, &f[..5], 0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = tiny(5);
        let seqs = [frames(6, 4), frames(7, 4)];
        let refs: Vec<&[Vec<f64>]> = seqs.iter().map(|s| s.as_slice()).collect();
        let images = images_tensor(&refs).unwrap();
        let loss = |p: &EdLstmParams| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let vars = p.bind(&mut g, true);
            let ll = batch_log_likelihood(&mut g, &vars, &images, 4, 2, 3).unwrap();
            let grads = g.backward(ll).unwrap();
            (g.value(ll).item(), vars.all().into_iter().map(|v| grads.get_or_zeros(v, g.shape(v))).collect())
        };
        let (_, grads) = loss(&p);
        let h = 1e-5;
        for (i, grad) in grads.iter().enumerate() {
            for j in 0..grad.len() {
                let mut plus = p.clone();
                plus.tensors_mut()[i].data_mut()[j] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[i].data_mut()[j] -= h;
                let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
                let a = grad.data()[j];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                assert!(rel < 1e-4, "tensor {i} entry {j}: {a} vs {fd}");
            }
        }
    }

    fn corpus() -> Corpus {
        let config = DatasetConfig {
            height: 10,
            width: 10,
            steps: 6,
            train_per_count: 4,
            test_per_count: 0,
            object_counts: vec![1, 2],
            ..DatasetConfig::desk32()
        };
        generate_corpus(&config).unwrap().train
    }

    fn config() -> EdLstmConfig {
        EdLstmConfig { encoder_dim: 6, state_dim: 5, batch_size: 3, iterations: 30, ..EdLstmConfig::desk32() }
    }

    #[test]
    fn training_is_reproducible_and_learns() {
        let c = corpus();
        let cfg = config();
        let start = EdLstmCheckpoint::new(initialize(&cfg, 100));
        let zero = train_edlstm(&EdLstmConfig { iterations: 0, ..cfg.clone() }, start.clone(), &c, |_| Ok(())).unwrap();
        assert_eq!(zero, start);
        let a = train_edlstm(&cfg, start.clone(), &c, |_| Ok(())).unwrap();
        let b = train_edlstm(&cfg, start, &c, |_| Ok(())).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 30);
        assert!(a.history[29].nll < a.history[0].nll);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let c = corpus();
        let mut start = EdLstmCheckpoint::new(initialize(&config(), 100));
        start.params.b_dec.data_mut()[0] = f64::NAN;
        assert!(matches!(train_edlstm(&config(), start, &c, |_| Ok(())), Err(Error::Diverged { iteration: 0, .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let ck = EdLstmCheckpoint {
            params: tiny(8),
            iteration: 7,
            history: vec![EdLstmRecord { iteration: 6, nll: 0.4 }],
        };
        let bytes = ck.encode().unwrap();
        let back = EdLstmCheckpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), bytes);
        let mut bad = bytes.clone();
        bad[20] ^= 4;
        assert!(EdLstmCheckpoint::decode(&bad).is_err());
    }

    #[test]
    fn init_std_is_inverse_root_of_size() {
        let p = initialize(&EdLstmConfig { encoder_dim: 100, state_dim: 25, ..EdLstmConfig::desk32() }, 100);
        let w = &p.w_enc;
        let n = w.len() as f64;
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var.sqrt() * 100.0 - 1.0).abs() < 0.05);
        assert!(p.b_gates.data().iter().all(|&v| v == 0.0));
    }
}
