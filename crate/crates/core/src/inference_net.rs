//! Amortized posterior over object positions, recurrent over time and
//! object index.
//!
//! ```text
//! βⁿ_t = sigm(W^β [sⁿ_{t−1}, sⁿ⁻¹_t, v_t] + b^β)
//! ŝⁿ_t = tanh(W^s [sⁿ_{t−1}, sⁿ⁻¹_t, v_t] + b^s)
//! sⁿ_t = (1 − βⁿ_t) ∘ sⁿ⁻¹_t + βⁿ_t ∘ ŝⁿ_t
//! ```
//!
//! with `s⁰_t = 0`, `sⁿ_0 = tanh(φ_{s0ⁿ})` and Gaussian readouts
//! `μ = W^μ s + b^μ`, `σ = exp(½(W^σ s + b^σ))` clamped to `[1e-4, 10]`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{init_weight, Graph, Tensor, Var};

pub const SIGMA_MIN: f64 = 1e-4;
pub const SIGMA_MAX: f64 = 10.0;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceParams {
    pub w_beta: Tensor,
    pub b_beta: Tensor,
    pub w_s: Tensor,
    pub b_s: Tensor,
    pub w_mu: Tensor,
    pub b_mu: Tensor,
    pub w_sigma: Tensor,
    pub b_sigma: Tensor,
    /// Initial-state parameters keyed by object count; entry `N` is `N × S`.
    pub s0: BTreeMap<usize, Tensor>,
}

#[derive(Debug, Clone)]
pub struct InferenceVars {
    pub w_beta: Var,
    pub b_beta: Var,
    pub w_s: Var,
    pub b_s: Var,
    pub w_mu: Var,
    pub b_mu: Var,
    pub w_sigma: Var,
    pub b_sigma: Var,
    pub s0: BTreeMap<usize, Var>,
}

impl InferenceVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![
            self.w_beta, self.b_beta, self.w_s, self.b_s, self.w_mu, self.b_mu, self.w_sigma, self.b_sigma,
        ];
        v.extend(self.s0.values().copied());
        v
    }
}

/// Graph nodes of a batched posterior, indexed `[t][n]`, each `rows × ·`.
#[derive(Debug, Clone)]
pub struct PosteriorVars {
    pub states: Vec<Vec<Var>>,
    pub means: Vec<Vec<Var>>,
    pub stds: Vec<Vec<Var>>,
}

/// Posterior for a single sequence, indexed `[t][n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorOutput {
    pub states: Vec<Vec<Vec<f64>>>,
    pub means: Vec<Vec<[f64; 2]>>,
    pub stds: Vec<Vec<[f64; 2]>>,
}

impl InferenceParams {
    pub fn zeros(state_dim: usize, pixels: usize, object_counts: &[usize]) -> Self {
        let width = 2 * state_dim + pixels;
        Self {
            w_beta: Tensor::zeros(state_dim, width),
            b_beta: Tensor::zeros(1, state_dim),
            w_s: Tensor::zeros(state_dim, width),
            b_s: Tensor::zeros(1, state_dim),
            w_mu: Tensor::zeros(2, state_dim),
            b_mu: Tensor::zeros(1, 2),
            w_sigma: Tensor::zeros(2, state_dim),
            b_sigma: Tensor::zeros(1, 2),
            s0: object_counts.iter().map(|&n| (n, Tensor::zeros(n, state_dim))).collect(),
        }
    }

    /// Weights and initial-state parameters drawn from `N(0, 1/√d)`, biases zero.
    pub fn init(rng: &mut impl Rng, state_dim: usize, pixels: usize, object_counts: &[usize]) -> Self {
        let width = 2 * state_dim + pixels;
        Self {
            w_beta: init_weight(rng, state_dim, width),
            w_s: init_weight(rng, state_dim, width),
            w_mu: init_weight(rng, 2, state_dim),
            w_sigma: init_weight(rng, 2, state_dim),
            s0: object_counts.iter().map(|&n| (n, init_weight(rng, n, state_dim))).collect(),
            ..Self::zeros(state_dim, pixels, &[])
        }
    }

    pub fn state_dim(&self) -> usize {
        self.w_beta.rows()
    }

    pub fn pixels(&self) -> usize {
        self.w_beta.cols() - 2 * self.state_dim()
    }

    pub fn object_counts(&self) -> Vec<usize> {
        self.s0.keys().copied().collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = [
            ("inference/w_beta", &self.w_beta),
            ("inference/b_beta", &self.b_beta),
            ("inference/w_s", &self.w_s),
            ("inference/b_s", &self.b_s),
            ("inference/w_mu", &self.w_mu),
            ("inference/b_mu", &self.b_mu),
            ("inference/w_sigma", &self.w_sigma),
            ("inference/b_sigma", &self.b_sigma),
        ]
        .into_iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect();
        v.extend(self.s0.iter().map(|(n, t)| (format!("inference/s0/{n}"), t)));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.w_beta,
            &mut self.b_beta,
            &mut self.w_s,
            &mut self.b_s,
            &mut self.w_mu,
            &mut self.b_mu,
            &mut self.w_sigma,
            &mut self.b_sigma,
        ];
        v.extend(self.s0.values_mut());
        v
    }

    /// Rebuild from named blocks, with `object_counts` naming the `s0` entries.
    pub fn from_named(object_counts: &[usize], mut get: impl FnMut(&str) -> Result<Tensor>) -> Result<Self> {
        let mut s0 = BTreeMap::new();
        for &n in object_counts {
            s0.insert(n, get(&format!("inference/s0/{n}"))?);
        }
        let p = Self {
            w_beta: get("inference/w_beta")?,
            b_beta: get("inference/b_beta")?,
            w_s: get("inference/w_s")?,
            b_s: get("inference/b_s")?,
            w_mu: get("inference/w_mu")?,
            b_mu: get("inference/b_mu")?,
            w_sigma: get("inference/w_sigma")?,
            b_sigma: get("inference/b_sigma")?,
            s0,
        };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let s = self.state_dim();
        let width = self.w_beta.cols();
        let ok = width > 2 * s
            && self.w_s.shape() == [s, width]
            && self.b_beta.shape() == [1, s]
            && self.b_s.shape() == [1, s]
            && self.w_mu.shape() == [2, s]
            && self.w_sigma.shape() == [2, s]
            && self.b_mu.shape() == [1, 2]
            && self.b_sigma.shape() == [1, 2]
            && self.s0.iter().all(|(&n, t)| t.shape() == [n, s]);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("inference parameter blocks have inconsistent shapes".into()))
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> InferenceVars {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        InferenceVars {
            w_beta: leaf(&self.w_beta),
            b_beta: leaf(&self.b_beta),
            w_s: leaf(&self.w_s),
            b_s: leaf(&self.b_s),
            w_mu: leaf(&self.w_mu),
            b_mu: leaf(&self.b_mu),
            w_sigma: leaf(&self.w_sigma),
            b_sigma: leaf(&self.b_sigma),
            s0: self.s0.iter().map(|(&n, t)| (n, leaf(t))).collect(),
        }
    }
}

/// Gaussian readouts `(μ, σ)` for a `rows × S` state.
pub fn readout(g: &mut Graph, vars: &InferenceVars, state: Var) -> Result<(Var, Var)> {
    let mu = g.matmul_t(state, vars.w_mu)?;
    let mu = g.add(mu, vars.b_mu)?;
    let lv = g.matmul_t(state, vars.w_sigma)?;
    let lv = g.add(lv, vars.b_sigma)?;
    let half = g.scale(lv, 0.5);
    let sigma = g.exp(half);
    Ok((mu, g.clamp(sigma, SIGMA_MIN, SIGMA_MAX)))
}

/// Run the double recurrence on a batch of `rows` sequences.
///
/// `images` is `(T·rows) × P` with time-major rows (row `t·rows + b`).
/// `initial` overrides `sⁿ_0` with `n_objects` nodes of shape `rows × S`.
pub fn infer_graph(
    g: &mut Graph,
    vars: &InferenceVars,
    images: Var,
    steps: usize,
    rows: usize,
    n_objects: usize,
    initial: Option<&[Var]>,
) -> Result<PosteriorVars> {
    let [s, width] = g.shape(vars.w_beta);
    let pixels = width - 2 * s;
    if g.shape(images) != [steps * rows, pixels] {
        return Err(Error::Shape(format!(
            "expected {}x{pixels} images, got {:?}",
            steps * rows,
            g.shape(images)
        )));
    }
    let initial_states = match initial {
        Some(init) => {
            if init.len() != n_objects || init.iter().any(|&v| g.shape(v) != [rows, s]) {
                return Err(Error::Shape(format!("initial states must be {n_objects} nodes of {rows}x{s}")));
            }
            init.to_vec()
        }
        None => {
            let phi = *vars
                .s0
                .get(&n_objects)
                .ok_or_else(|| Error::InvalidArgument(format!("object count {n_objects} is not supported")))?;
            let zeros = g.constant(Tensor::zeros(rows, s));
            let mut v = Vec::with_capacity(n_objects);
            for n in 0..n_objects {
                let row = g.slice_rows(phi, n, 1)?;
                let row = g.tanh(row);
                v.push(g.add(zeros, row)?);
            }
            v
        }
    };

    // Gate and candidate weights stacked into one matrix.
    let wb_rec = g.slice_cols(vars.w_beta, 0, 2 * s)?;
    let ws_rec = g.slice_cols(vars.w_s, 0, 2 * s)?;
    let w_rec = g.concat_rows(&[wb_rec, ws_rec])?;
    let wb_img = g.slice_cols(vars.w_beta, 2 * s, pixels)?;
    let ws_img = g.slice_cols(vars.w_s, 2 * s, pixels)?;
    let w_img = g.concat_rows(&[wb_img, ws_img])?;
    let bias = g.concat_cols(&[vars.b_beta, vars.b_s])?;
    let image_part = g.matmul_t(images, w_img)?;
    let image_part = g.add(image_part, bias)?;
    let no_object = g.constant(Tensor::zeros(rows, s));

    let mut prev = initial_states;
    let mut out = PosteriorVars { states: Vec::new(), means: Vec::new(), stds: Vec::new() };
    for t in 0..steps {
        let img_t = g.slice_rows(image_part, t * rows, rows)?;
        let mut below = no_object;
        let (mut st, mut mt, mut sd) = (Vec::new(), Vec::new(), Vec::new());
        for n in 0..n_objects {
            let input = g.concat_cols(&[prev[n], below])?;
            let pre = g.matmul_t(input, w_rec)?;
            let pre = g.add(pre, img_t)?;
            let pre_beta = g.slice_cols(pre, 0, s)?;
            let pre_cand = g.slice_cols(pre, s, s)?;
            let beta = g.sigmoid(pre_beta);
            let cand = g.tanh(pre_cand);
            let keep = g.one_minus(beta);
            let kept = g.mul(keep, below)?;
            let added = g.mul(beta, cand)?;
            let state = g.add(kept, added)?;
            let (mu, sigma) = readout(g, vars, state)?;
            st.push(state);
            mt.push(mu);
            sd.push(sigma);
            below = state;
        }
        prev = st.clone();
        out.states.push(st);
        out.means.push(mt);
        out.stds.push(sd);
    }
    Ok(out)
}

/// Per-row diagonal-Gaussian log-density `Σ log N(a; μ, diag σ²)` over all
/// `(t, n)` entries, as a `rows × 1` node.
pub fn log_q_graph(g: &mut Graph, means: &[Var], stds: &[Var], positions: &[Var]) -> Result<Var> {
    if means.len() != stds.len() || means.len() != positions.len() || means.is_empty() {
        return Err(Error::Shape("log_q needs matching, non-empty means, stds and positions".into()));
    }
    let mut total: Option<Var> = None;
    for ((&m, &sd), &a) in means.iter().zip(stds).zip(positions) {
        let diff = g.sub(a, m)?;
        let z = g.div(diff, sd)?;
        let z2 = g.square(z);
        let half = g.scale(z2, -0.5);
        let log_sd = g.log(sd);
        let term = g.sub(half, log_sd)?;
        let term = g.offset(term, -0.5 * LN_2PI);
        let row = g.sum_cols(term);
        total = Some(match total {
            None => row,
            Some(acc) => g.add(acc, row)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Run inference on one sequence of (possibly non-binary) frames.
pub fn infer(
    params: &InferenceParams,
    frames: &[Vec<f64>],
    n_objects: usize,
    initial_states: Option<&[Vec<f64>]>,
) -> Result<PosteriorOutput> {
    if !params.s0.contains_key(&n_objects) && initial_states.is_none() {
        return Err(Error::InvalidArgument(format!("object count {n_objects} is not supported")));
    }
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no frames to infer from".into()));
    }
    let pixels = params.pixels();
    let mut data = Vec::with_capacity(frames.len() * pixels);
    for f in frames {
        if f.len() != pixels {
            return Err(Error::Shape(format!("frame has {} pixels, expected {pixels}", f.len())));
        }
        data.extend_from_slice(f);
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let images = g.constant(Tensor::new(frames.len(), pixels, data)?);
    let init = match initial_states {
        Some(states) => {
            let mut v = Vec::with_capacity(states.len());
            for s in states {
                v.push(g.constant(Tensor::new(1, s.len(), s.clone())?));
            }
            Some(v)
        }
        None => None,
    };
    let post = infer_graph(&mut g, &vars, images, frames.len(), 1, n_objects, init.as_deref())?;
    let pair = |t: &Tensor| [t.data()[0], t.data()[1]];
    Ok(PosteriorOutput {
        states: post
            .states
            .iter()
            .map(|row| row.iter().map(|&v| g.value(v).data().to_vec()).collect())
            .collect(),
        means: post.means.iter().map(|row| row.iter().map(|&v| pair(g.value(v))).collect()).collect(),
        stds: post.stds.iter().map(|row| row.iter().map(|&v| pair(g.value(v))).collect()).collect(),
    })
}

fn check_like(output: &PosteriorOutput, other: &[Vec<[f64; 2]>]) -> Result<()> {
    let same = other.len() == output.means.len() && other.iter().zip(&output.means).all(|(a, m)| a.len() == m.len());
    if same {
        Ok(())
    } else {
        Err(Error::Shape("positions do not match the posterior's T×N layout".into()))
    }
}

/// `a = μ + σ ∘ ε` entrywise.
pub fn sample_positions(output: &PosteriorOutput, noise: &[Vec<[f64; 2]>]) -> Result<Vec<Vec<[f64; 2]>>> {
    check_like(output, noise)?;
    Ok(output
        .means
        .iter()
        .zip(&output.stds)
        .zip(noise)
        .map(|((m, s), e)| {
            m.iter()
                .zip(s)
                .zip(e)
                .map(|((m, s), e)| [m[0] + s[0] * e[0], m[1] + s[1] * e[1]])
                .collect()
        })
        .collect())
}

/// `Σ_{t,n} log N(aⁿ_t; μⁿ_t, diag σⁿ_t²)`.
pub fn log_q(output: &PosteriorOutput, positions: &[Vec<[f64; 2]>]) -> Result<f64> {
    check_like(output, positions)?;
    let mut total = 0.0;
    for ((m, s), a) in output.means.iter().zip(&output.stds).zip(positions) {
        for ((m, s), a) in m.iter().zip(s).zip(a) {
            for d in 0..2 {
                let z = (a[d] - m[d]) / s[d];
                total -= 0.5 * (LN_2PI + z * z) + s[d].ln();
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sigmoid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(seed: u64, s: usize, p: usize, counts: &[usize]) -> InferenceParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = InferenceParams::zeros(s, p, counts);
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        params
    }

    fn random_frames(seed: u64, steps: usize, p: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..steps).map(|_| (0..p).map(|_| rng.gen_range(0..2) as f64).collect()).collect()
    }

    #[test]
    fn constant_network_outputs_the_mean_bias() {
        let mut params = InferenceParams::zeros(4, 6, &[1, 2]);
        params.b_mu = Tensor::row(&[0.7, -1.3]);
        let out = infer(&params, &random_frames(1, 3, 6), 2, None).unwrap();
        for row in &out.means {
            for m in row {
                assert_eq!(*m, [0.7, -1.3]);
            }
        }
        for row in &out.stds {
            for s in row {
                assert_eq!(*s, [1.0, 1.0]);
            }
        }
    }

    #[test]
    fn hand_computed_single_step() {
        // S = 2, P = 1, with columns [s_prev (2), s_below (2), v (1)].
        let mut p = InferenceParams::zeros(2, 1, &[1]);
        p.w_beta = Tensor::new(2, 5, vec![0.5, 0.0, 9.0, 9.0, 1.0, 0.0, -1.0, 9.0, 9.0, 2.0]).unwrap();
        p.b_beta = Tensor::row(&[0.1, -0.2]);
        p.w_s = Tensor::new(2, 5, vec![1.0, 1.0, 9.0, 9.0, -1.0, 0.3, 0.0, 9.0, 9.0, 0.5]).unwrap();
        p.b_s = Tensor::row(&[0.0, 0.4]);
        p.w_mu = Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        p.b_mu = Tensor::row(&[0.5, 0.0]);
        p.w_sigma = Tensor::new(2, 2, vec![2.0, 0.0, 0.0, -2.0]).unwrap();
        p.s0.insert(1, Tensor::row(&[0.3, -0.6]));
        let v = 1.0;

        let s0 = [0.3f64.tanh(), (-0.6f64).tanh()];
        let beta = [sigmoid(0.5 * s0[0] + v + 0.1), sigmoid(-s0[1] + 2.0 * v - 0.2)];
        let cand = [(s0[0] + s0[1] - v).tanh(), (0.3 * s0[0] + 0.5 * v + 0.4).tanh()];
        let s = [beta[0] * cand[0], beta[1] * cand[1]];
        let mu = [s[0] + 0.5, 2.0 * s[1]];
        let sigma = [(0.5 * 2.0 * s[0]).exp(), (0.5 * -2.0 * s[1]).exp()];

        let out = infer(&p, &[vec![v]], 1, None).unwrap();
        for d in 0..2 {
            assert!((out.states[0][0][d] - s[d]).abs() < 1e-15);
            assert!((out.means[0][0][d] - mu[d]).abs() < 1e-15);
            assert!((out.stds[0][0][d] - sigma[d]).abs() < 1e-15);
        }
    }

    /// Loop-by-loop evaluation of the recurrence with plain vectors.
    fn reference(p: &InferenceParams, frames: &[Vec<f64>], n_objects: usize) -> Vec<Vec<Vec<f64>>> {
        let s = p.state_dim();
        let affine = |w: &Tensor, b: &Tensor, x: &[f64]| -> Vec<f64> {
            (0..s).map(|i| b.data()[i] + (0..x.len()).map(|j| w.get(i, j) * x[j]).sum::<f64>()).collect()
        };
        let phi = &p.s0[&n_objects];
        let mut prev: Vec<Vec<f64>> = (0..n_objects).map(|n| phi.row_slice(n).iter().map(|v| v.tanh()).collect()).collect();
        let mut all = Vec::new();
        for v in frames {
            let mut below = vec![0.0; s];
            let mut states = Vec::new();
            for state_prev in prev.iter().take(n_objects) {
                let x: Vec<f64> = state_prev.iter().chain(&below).chain(v).copied().collect();
                let beta: Vec<f64> = affine(&p.w_beta, &p.b_beta, &x).iter().map(|&z| sigmoid(z)).collect();
                let cand: Vec<f64> = affine(&p.w_s, &p.b_s, &x).iter().map(|z| z.tanh()).collect();
                let new: Vec<f64> = (0..s).map(|i| (1.0 - beta[i]) * below[i] + beta[i] * cand[i]).collect();
                states.push(new.clone());
                below = new;
            }
            prev = states.clone();
            all.push(states);
        }
        all
    }

    #[test]
    fn matches_straight_line_reference() {
        let p = random_params(2, 3, 4, &[2]);
        let frames = random_frames(3, 4, 4);
        let out = infer(&p, &frames, 2, None).unwrap();
        let expected = reference(&p, &frames, 2);
        for (a, b) in out.states.iter().flatten().zip(expected.iter().flatten()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_in_time() {
        let p = random_params(4, 5, 6, &[2]);
        let frames = random_frames(5, 6, 6);
        let short = infer(&p, &frames[..3], 2, None).unwrap();
        let long = infer(&p, &frames, 2, None).unwrap();
        assert_eq!(short.states[..], long.states[..3]);
        assert_eq!(short.means[..], long.means[..3]);
        let mut changed = frames.clone();
        changed[4] = vec![0.5; 6];
        let other = infer(&p, &changed, 2, None).unwrap();
        assert_eq!(other.means[..4], long.means[..4]);
    }

    #[test]
    fn unsupported_object_count_errors() {
        let p = random_params(6, 3, 4, &[1, 2]);
        assert!(infer(&p, &random_frames(7, 2, 4), 3, None).is_err());
    }

    #[test]
    fn override_replaces_the_learned_initial_state() {
        let p = random_params(8, 3, 4, &[2]);
        let frames = random_frames(9, 4, 4);
        let full = infer(&p, &frames, 2, None).unwrap();
        let warm = full.states[1].clone();
        let resumed = infer(&p, &frames[2..], 2, Some(&warm)).unwrap();
        assert_eq!(resumed.states[..], full.states[2..]);
    }

    #[test]
    fn batched_rows_match_individual_sequences() {
        let p = random_params(10, 3, 4, &[2]);
        let seqs: Vec<Vec<Vec<f64>>> = (0..3).map(|i| random_frames(20 + i, 4, 4)).collect();
        let mut g = Graph::new();
        let vars = p.bind(&mut g, false);
        let mut data = Vec::new();
        for t in 0..4 {
            for s in &seqs {
                data.extend_from_slice(&s[t]);
            }
        }
        let images = g.constant(Tensor::new(12, 4, data).unwrap());
        let post = infer_graph(&mut g, &vars, images, 4, 3, 2, None).unwrap();
        for (b, s) in seqs.iter().enumerate() {
            let single = infer(&p, s, 2, None).unwrap();
            for t in 0..4 {
                for n in 0..2 {
                    let row = g.value(post.means[t][n]).row_slice(b).to_vec();
                    assert!((row[0] - single.means[t][n][0]).abs() < 1e-14);
                    assert!((row[1] - single.means[t][n][1]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn sampling_shifts_means_by_scaled_noise() {
        let p = random_params(11, 3, 4, &[2]);
        let out = infer(&p, &random_frames(12, 2, 4), 2, None).unwrap();
        let zero = vec![vec![[0.0, 0.0]; 2]; 2];
        assert_eq!(sample_positions(&out, &zero).unwrap(), out.means);
        let one = vec![vec![[1.0, 1.0]; 2]; 2];
        let a = sample_positions(&out, &one).unwrap();
        for t in 0..2 {
            for n in 0..2 {
                for d in 0..2 {
                    assert_eq!(a[t][n][d], out.means[t][n][d] + out.stds[t][n][d]);
                }
            }
        }
        assert!(sample_positions(&out, &zero[..1]).is_err());
    }

    #[test]
    fn sample_gradient_wrt_readout_matches_finite_differences() {
        let p = random_params(13, 3, 4, &[1]);
        let frames = random_frames(14, 3, 4);
        let noise: Vec<Tensor> = {
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            (0..3).map(|_| Tensor::from_fn(1, 2, |_, _| rng.gen_range(-1.0..1.0))).collect()
        };
        let data: Vec<f64> = frames.concat();
        let eval = |p: &InferenceParams| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let vars = p.bind(&mut g, true);
            let images = g.constant(Tensor::new(3, 4, data.clone()).unwrap());
            let post = infer_graph(&mut g, &vars, images, 3, 1, 1, None).unwrap();
            let mut total = g.scalar(0.0);
            for t in 0..3 {
                let e = g.constant(noise[t].clone());
                let a = crate::numerics::gaussian_sample(&mut g, post.means[t][0], post.stds[t][0], e).unwrap();
                let s = g.sum(a);
                total = g.add(total, s).unwrap();
            }
            let grads = g.backward(total).unwrap();
            let readouts = [vars.w_mu, vars.b_mu, vars.w_sigma, vars.b_sigma];
            (g.value(total).item(), readouts.iter().map(|&v| grads.get_or_zeros(v, g.shape(v))).collect())
        };
        let (_, grads) = eval(&p);
        let h = 1e-5;
        for (i, grad) in grads.iter().enumerate() {
            for j in 0..grad.len() {
                let mut plus = p.clone();
                plus.tensors_mut()[4 + i].data_mut()[j] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[4 + i].data_mut()[j] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = grad.data()[j];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "readout {i}[{j}]: {a} vs {fd}");
            }
        }
    }

    fn random_output(seed: u64, steps: usize, n: usize) -> PosteriorOutput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pair = |lo: f64, hi: f64| [rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
        let means = (0..steps).map(|_| (0..n).map(|_| pair(-2.0, 2.0)).collect()).collect();
        let stds = (0..steps).map(|_| (0..n).map(|_| pair(0.1, 2.0)).collect()).collect();
        PosteriorOutput { states: vec![vec![Vec::new(); n]; steps], means, stds }
    }

    #[test]
    fn standardized_mode_density() {
        let mut out = random_output(16, 3, 2);
        out.stds = vec![vec![[1.0, 1.0]; 2]; 3];
        let ll = log_q(&out, &out.means).unwrap();
        assert!((ll + 6.0 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn log_q_matches_density_product_and_graph() {
        let out = random_output(17, 3, 2);
        let a = sample_positions(&out, &random_output(18, 3, 2).means).unwrap();
        let mut product = 1.0;
        for t in 0..3 {
            for n in 0..2 {
                for d in 0..2 {
                    let (m, s, x) = (out.means[t][n][d], out.stds[t][n][d], a[t][n][d]);
                    product *= (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
                }
            }
        }
        let ll = log_q(&out, &a).unwrap();
        assert!((ll - product.ln()).abs() < 1e-10);

        let mut g = Graph::new();
        let mut nodes = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..3 {
            for n in 0..2 {
                nodes.0.push(g.constant(Tensor::row(&out.means[t][n])));
                nodes.1.push(g.constant(Tensor::row(&out.stds[t][n])));
                nodes.2.push(g.constant(Tensor::row(&a[t][n])));
            }
        }
        let lq = log_q_graph(&mut g, &nodes.0, &nodes.1, &nodes.2).unwrap();
        assert!((g.value(lq).item() - ll).abs() < 1e-12);
    }

    #[test]
    fn log_q_is_translation_invariant() {
        let out = random_output(19, 2, 2);
        let a = random_output(20, 2, 2).means;
        let shift = |xs: &[Vec<[f64; 2]>]| -> Vec<Vec<[f64; 2]>> {
            xs.iter().map(|r| r.iter().map(|p| [p[0] + 3.5, p[1] - 1.25]).collect()).collect()
        };
        let mut moved = out.clone();
        moved.means = shift(&out.means);
        let lhs = log_q(&out, &a).unwrap();
        let rhs = log_q(&moved, &shift(&a)).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn gates_and_states_stay_in_range(seed in 0u64..200) {
            let p = random_params(seed, 4, 5, &[2]);
            let frames = random_frames(seed + 1000, 3, 5);
            let out = infer(&p, &frames, 2, None).unwrap();
            prop_assert!(out.states.iter().flatten().flatten().all(|v| v.abs() < 1.0));
            prop_assert!(out.stds.iter().flatten().flatten().all(|&s| (SIGMA_MIN..=SIGMA_MAX).contains(&s)));
        }
    }
}
