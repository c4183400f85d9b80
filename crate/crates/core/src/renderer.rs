//! Recurrent attention renderer: composites N object positions onto a
//! latent canvas and emits Bernoulli pixel probabilities.
//!
//! ```text
//! x⁰ = tanh(θ_x0)
//! αⁿ = sigm(W^α aⁿ + b^α)
//! x̂ⁿ = tanh(W^x aⁿ + b^x)
//! xⁿ = (1 − αⁿ) ∘ xⁿ⁻¹ + αⁿ ∘ x̂ⁿ
//! p  = sigm(W^v x^N + b^v)
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Probabilities are clamped this far from 0 and 1 before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct RendererParams {
    pub w_alpha: Tensor,
    pub b_alpha: Tensor,
    pub w_x: Tensor,
    pub b_x: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub theta_x0: Tensor,
}

#[derive(Debug, Clone)]
pub struct RendererVars {
    pub w_alpha: Var,
    pub b_alpha: Var,
    pub w_x: Var,
    pub b_x: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub theta_x0: Var,
}

impl RendererVars {
    pub fn all(&self) -> Vec<Var> {
        vec![self.w_alpha, self.b_alpha, self.w_x, self.b_x, self.w_v, self.b_v, self.theta_x0]
    }
}

impl RendererParams {
    /// All-zero parameters for a `canvas_dim`-dimensional canvas and `pixels` outputs.
    pub fn zeros(canvas_dim: usize, pixels: usize) -> Self {
        Self {
            w_alpha: Tensor::zeros(canvas_dim, 2),
            b_alpha: Tensor::zeros(1, canvas_dim),
            w_x: Tensor::zeros(canvas_dim, 2),
            b_x: Tensor::zeros(1, canvas_dim),
            w_v: Tensor::zeros(pixels, canvas_dim),
            b_v: Tensor::zeros(1, pixels),
            theta_x0: Tensor::zeros(1, canvas_dim),
        }
    }

    /// Weights drawn from `N(0, 1/√d)` (d = element count), biases and
    /// the canvas parameter at zero.
    pub fn init(rng: &mut impl Rng, canvas_dim: usize, pixels: usize) -> Self {
        use crate::numerics::init_weight;
        Self {
            w_alpha: init_weight(rng, canvas_dim, 2),
            w_x: init_weight(rng, canvas_dim, 2),
            w_v: init_weight(rng, pixels, canvas_dim),
            ..Self::zeros(canvas_dim, pixels)
        }
    }

    pub fn canvas_dim(&self) -> usize {
        self.w_alpha.rows()
    }

    pub fn pixels(&self) -> usize {
        self.w_v.rows()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        [
            ("renderer/w_alpha", &self.w_alpha),
            ("renderer/b_alpha", &self.b_alpha),
            ("renderer/w_x", &self.w_x),
            ("renderer/b_x", &self.b_x),
            ("renderer/w_v", &self.w_v),
            ("renderer/b_v", &self.b_v),
            ("renderer/theta_x0", &self.theta_x0),
        ]
        .into_iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_alpha,
            &mut self.b_alpha,
            &mut self.w_x,
            &mut self.b_x,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.theta_x0,
        ]
    }

    pub fn from_named(mut get: impl FnMut(&str) -> Result<Tensor>) -> Result<Self> {
        let p = Self {
            w_alpha: get("renderer/w_alpha")?,
            b_alpha: get("renderer/b_alpha")?,
            w_x: get("renderer/w_x")?,
            b_x: get("renderer/b_x")?,
            w_v: get("renderer/w_v")?,
            b_v: get("renderer/b_v")?,
            theta_x0: get("renderer/theta_x0")?,
        };
        let (d, px) = (p.canvas_dim(), p.pixels());
        let ok = p.w_alpha.shape() == [d, 2]
            && p.w_x.shape() == [d, 2]
            && p.b_alpha.shape() == [1, d]
            && p.b_x.shape() == [1, d]
            && p.w_v.shape() == [px, d]
            && p.b_v.shape() == [1, px]
            && p.theta_x0.shape() == [1, d];
        if !ok {
            return Err(Error::Shape("renderer parameter blocks have inconsistent shapes".into()));
        }
        Ok(p)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> RendererVars {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        RendererVars {
            w_alpha: leaf(&self.w_alpha),
            b_alpha: leaf(&self.b_alpha),
            w_x: leaf(&self.w_x),
            b_x: leaf(&self.b_x),
            w_v: leaf(&self.w_v),
            b_v: leaf(&self.b_v),
            theta_x0: leaf(&self.theta_x0),
        }
    }
}

/// `x⁰ = tanh(θ_x0)`, a `1 × D` node.
pub fn empty_canvas(g: &mut Graph, vars: &RendererVars) -> Var {
    g.tanh(vars.theta_x0)
}

/// One attention-gated compositing step for a `rows × 2` batch of positions.
pub fn composite(g: &mut Graph, vars: &RendererVars, canvas: Var, position: Var) -> Result<Var> {
    let pre_alpha = g.matmul_t(position, vars.w_alpha)?;
    let pre_alpha = g.add(pre_alpha, vars.b_alpha)?;
    let alpha = g.sigmoid(pre_alpha);
    let pre_x = g.matmul_t(position, vars.w_x)?;
    let pre_x = g.add(pre_x, vars.b_x)?;
    let contribution = g.tanh(pre_x);
    let keep = g.one_minus(alpha);
    let kept = g.mul(keep, canvas)?;
    let added = g.mul(alpha, contribution)?;
    g.add(kept, added)
}

/// Emission logits `W^v x + b^v`.
pub fn emission_logits(g: &mut Graph, vars: &RendererVars, canvas: Var) -> Result<Var> {
    let l = g.matmul_t(canvas, vars.w_v)?;
    g.add(l, vars.b_v)
}

/// Pre-emission canvas state after compositing every object in order.
pub fn canvas_state(g: &mut Graph, vars: &RendererVars, positions: &[Var]) -> Result<Var> {
    let mut x = empty_canvas(g, vars);
    for &p in positions {
        x = composite(g, vars, x, p)?;
    }
    Ok(x)
}

/// Pixel probabilities for each row of positions (`rows × P`).
pub fn render_graph(g: &mut Graph, vars: &RendererVars, positions: &[Var]) -> Result<Var> {
    let x = canvas_state(g, vars, positions)?;
    let logits = emission_logits(g, vars, x)?;
    Ok(g.sigmoid(logits))
}

/// Clamped Bernoulli log-likelihood summed along each row (`rows × 1`).
pub fn bernoulli_log_likelihood_graph(g: &mut Graph, probs: Var, images: Var) -> Result<Var> {
    let p = g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = g.log(p);
    let q = g.one_minus(p);
    let log_q = g.log(q);
    let not_v = g.one_minus(images);
    let on = g.mul(images, log_p)?;
    let off = g.mul(not_v, log_q)?;
    let total = g.add(on, off)?;
    Ok(g.sum_cols(total))
}

/// Pixel probabilities for one image with objects at `positions`.
pub fn render(params: &RendererParams, positions: &[[f64; 2]]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let nodes: Vec<Var> = positions.iter().map(|p| g.constant(Tensor::row(p))).collect();
    let probs = render_graph(&mut g, &vars, &nodes)?;
    Ok(g.value(probs).data().to_vec())
}

/// `Σ_p v_p log p_p + (1 − v_p) log(1 − p_p)` with clamped probabilities.
pub fn log_likelihood_image(probs: &[f64], image: &[u8]) -> Result<f64> {
    if probs.len() != image.len() {
        return Err(Error::Shape(format!("{} probabilities for {} pixels", probs.len(), image.len())));
    }
    let mut total = 0.0;
    for (&p, &v) in probs.iter().zip(image) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total += match v {
            1 => p.ln(),
            0 => (1.0 - p).ln(),
            other => return Err(Error::InvalidArgument(format!("non-binary pixel value {other}"))),
        };
    }
    Ok(total)
}

/// Independent Bernoulli draw per pixel.
pub fn sample_image(probs: &[f64], rng: &mut impl Rng) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(rng.gen::<f64>() < p)).collect()
}
