//! Unconstrained LGSSM parameters and the differentiable Kalman recursion.
//!
//! Covariances are stored as lower-triangular Cholesky factors whose
//! diagonal is kept in log-space; mixture weights are softmax logits.
//! `δ` and `u` are free inside the fixed block structure of `A`.

use nalgebra::{DMatrix, DVector};

use super::{LgssmParams, MixtureComponent, OBS_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct LgssmLearnable {
    pub delta: Tensor,
    pub force: Tensor,
    pub sigma_h_raw: Tensor,
    pub sigma_a_raw: Tensor,
    pub logits: Tensor,
    pub means: Tensor,
    pub prior_raw: Vec<Tensor>,
}

/// Graph handles for one bound copy of [`LgssmLearnable`].
#[derive(Debug, Clone)]
pub struct LgssmVars {
    pub delta: Var,
    pub force: Var,
    pub sigma_h_raw: Var,
    pub sigma_a_raw: Var,
    pub logits: Var,
    pub means: Var,
    pub prior_raw: Vec<Var>,
}

impl LgssmVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.delta, self.force, self.sigma_h_raw, self.sigma_a_raw, self.logits, self.means];
        v.extend(&self.prior_raw);
        v
    }
}

fn raw_to_cov(raw: &Tensor) -> DMatrix<f64> {
    let n = raw.rows();
    let l = DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => raw.get(i, j),
        std::cmp::Ordering::Equal => raw.get(i, i).exp(),
        std::cmp::Ordering::Less => 0.0,
    });
    &l * l.transpose()
}

fn cov_to_raw(cov: &DMatrix<f64>) -> Result<Tensor> {
    let n = cov.nrows();
    let chol = cov
        .clone()
        .cholesky()
        .or_else(|| (cov + DMatrix::identity(n, n) * 1e-12).cholesky())
        .ok_or_else(|| Error::NotPsd("covariance".into()))?;
    let l = chol.l();
    Ok(Tensor::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => l[(i, j)],
        std::cmp::Ordering::Equal => l[(i, i)].ln(),
        std::cmp::Ordering::Less => 0.0,
    }))
}

fn tensor_row_to_vec(t: &Tensor, row: usize) -> DVector<f64> {
    DVector::from_row_slice(t.row_slice(row))
}

impl LgssmLearnable {
    pub fn num_components(&self) -> usize {
        self.logits.cols()
    }

    /// Parameter tensors with their checkpoint names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("lgssm/delta".to_string(), &self.delta),
            ("lgssm/force".to_string(), &self.force),
            ("lgssm/sigma_h_chol".to_string(), &self.sigma_h_raw),
            ("lgssm/sigma_a_chol".to_string(), &self.sigma_a_raw),
            ("lgssm/logits".to_string(), &self.logits),
            ("lgssm/means".to_string(), &self.means),
        ];
        for (k, t) in self.prior_raw.iter().enumerate() {
            out.push((format!("lgssm/prior_chol/{k}"), t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.delta,
            &mut self.force,
            &mut self.sigma_h_raw,
            &mut self.sigma_a_raw,
            &mut self.logits,
            &mut self.means,
        ];
        out.extend(self.prior_raw.iter_mut());
        out
    }

    /// Rebuild from named tensors (the inverse of [`Self::named_tensors`]).
    pub fn from_named(mut get: impl FnMut(&str) -> Result<Tensor>) -> Result<Self> {
        let logits = get("lgssm/logits")?;
        let k = logits.cols();
        let prior_raw = (0..k).map(|i| get(&format!("lgssm/prior_chol/{i}"))).collect::<Result<Vec<_>>>()?;
        let out = Self {
            delta: get("lgssm/delta")?,
            force: get("lgssm/force")?,
            sigma_h_raw: get("lgssm/sigma_h_chol")?,
            sigma_a_raw: get("lgssm/sigma_a_chol")?,
            logits,
            means: get("lgssm/means")?,
            prior_raw,
        };
        out.check_shapes()?;
        Ok(out)
    }

    fn check_shapes(&self) -> Result<()> {
        let k = self.num_components();
        let ok = self.delta.shape() == [1, 1]
            && self.force.shape() == [1, STATE_DIM]
            && self.sigma_h_raw.shape() == [STATE_DIM, STATE_DIM]
            && self.sigma_a_raw.shape() == [OBS_DIM, OBS_DIM]
            && self.means.shape() == [k, STATE_DIM]
            && self.prior_raw.len() == k
            && self.prior_raw.iter().all(|t| t.shape() == [STATE_DIM, STATE_DIM]);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("LGSSM parameter blocks have inconsistent shapes".into()))
        }
    }

    /// Constrained parameters for exact inference.
    pub fn to_params(&self) -> LgssmParams {
        let logits = self.logits.data();
        let norm = crate::numerics::logsumexp(logits);
        let components = (0..self.num_components())
            .map(|k| MixtureComponent {
                weight: (logits[k] - norm).exp(),
                mean: tensor_row_to_vec(&self.means, k),
                cov: raw_to_cov(&self.prior_raw[k]),
            })
            .collect();
        LgssmParams {
            delta: self.delta.item(),
            force: tensor_row_to_vec(&self.force, 0),
            sigma_h: raw_to_cov(&self.sigma_h_raw),
            sigma_a: raw_to_cov(&self.sigma_a_raw),
            components,
        }
    }

    pub fn from_params(p: &LgssmParams) -> Result<Self> {
        p.validate()?;
        let k = p.num_components();
        let logits = Tensor::from_fn(1, k, |_, j| p.components[j].weight.max(1e-300).ln());
        let means = Tensor::from_fn(k, STATE_DIM, |i, j| p.components[i].mean[j]);
        Ok(Self {
            delta: Tensor::scalar(p.delta),
            force: Tensor::from_fn(1, STATE_DIM, |_, j| p.force[j]),
            sigma_h_raw: cov_to_raw(&p.sigma_h)?,
            sigma_a_raw: cov_to_raw(&p.sigma_a)?,
            logits,
            means,
            prior_raw: p.components.iter().map(|c| cov_to_raw(&c.cov)).collect::<Result<_>>()?,
        })
    }

    /// Register every tensor on `g`, as parameters when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LgssmVars {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        LgssmVars {
            delta: leaf(&self.delta),
            force: leaf(&self.force),
            sigma_h_raw: leaf(&self.sigma_h_raw),
            sigma_a_raw: leaf(&self.sigma_a_raw),
            logits: leaf(&self.logits),
            means: leaf(&self.means),
            prior_raw: self.prior_raw.iter().map(&mut leaf).collect(),
        }
    }
}

/// `L Lᵀ` for `L` = strict lower part of `raw` plus `exp(diag(raw))`.
pub fn covariance_from_raw(g: &mut Graph, raw: Var) -> Result<Var> {
    let n = g.shape(raw)[0];
    let lower = g.constant(Tensor::from_fn(n, n, |i, j| if i > j { 1.0 } else { 0.0 }));
    let diag = g.constant(Tensor::eye(n));
    let off = g.mul(raw, lower)?;
    let e = g.exp(raw);
    let on = g.mul(e, diag)?;
    let l = g.add(off, on)?;
    g.matmul_t(l, l)
}

/// Differentiable `log Σ_k π_k p(a | z = k)` for a batch of trajectories
/// sharing the same parameters.
///
/// `positions[t]` is a `rows × 2` node holding the step-`t` positions of
/// every trajectory; steps with `mask[t] == false` are marginalized.
/// Returns a `rows × 1` node.
pub fn log_marginal_graph(g: &mut Graph, vars: &LgssmVars, positions: &[Var], mask: &[bool]) -> Result<Var> {
    if positions.len() != mask.len() || positions.is_empty() {
        return Err(Error::Shape("positions and mask must have equal, non-zero length".into()));
    }
    let k_count = vars.prior_raw.len();
    let eye4 = g.constant(Tensor::eye(STATE_DIM));
    let shift = g.constant(Tensor::from_fn(STATE_DIM, STATE_DIM, |i, j| {
        if (i, j) == (0, 2) || (i, j) == (1, 3) {
            1.0
        } else {
            0.0
        }
    }));
    let zeros42 = g.constant(Tensor::zeros(STATE_DIM, OBS_DIM));
    let scaled_shift = g.mul(shift, vars.delta)?;
    let a = g.add(eye4, scaled_shift)?;
    let q = covariance_from_raw(g, vars.sigma_h_raw)?;
    let r = covariance_from_raw(g, vars.sigma_a_raw)?;

    let mut per_component = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let mut mean = g.slice_rows(vars.means, k, 1)?;
        let mut cov = covariance_from_raw(g, vars.prior_raw[k])?;
        let mut ll: Option<Var> = None;
        for (t, (&y, &observed)) in positions.iter().zip(mask).enumerate() {
            if t > 0 {
                let m = g.matmul_t(mean, a)?;
                mean = g.add(m, vars.force)?;
                let ap = g.matmul(a, cov)?;
                let apa = g.matmul_t(ap, a)?;
                cov = g.add(apa, q)?;
            }
            if !observed {
                continue;
            }
            // S = B P Bᵀ + Σ_A, with B = [I, 0] selecting the position block.
            let p_cols = g.slice_cols(cov, 0, OBS_DIM)?;
            let p_block = g.slice_rows(p_cols, 0, OBS_DIM)?;
            let s = g.add(p_block, r)?;
            let s_inv = g.inverse(s)?;
            let log_det = g.log_det(s)?;
            let gain = g.matmul(p_cols, s_inv)?;
            let pred_pos = g.slice_cols(mean, 0, OBS_DIM)?;
            let innov = g.sub(y, pred_pos)?;
            let corr = g.matmul_t(innov, gain)?;
            mean = g.add(mean, corr)?;
            // Joseph form: (I - K B) P (I - K B)ᵀ + K Σ_A Kᵀ.
            let kb = g.concat_cols(&[gain, zeros42])?;
            let ikb = g.sub(eye4, kb)?;
            let left = g.matmul(ikb, cov)?;
            let joseph = g.matmul_t(left, ikb)?;
            let kr = g.matmul(gain, r)?;
            let krk = g.matmul_t(kr, gain)?;
            cov = g.add(joseph, krk)?;

            let weighted = g.matmul(innov, s_inv)?;
            let quad_terms = g.mul(weighted, innov)?;
            let quad = g.sum_cols(quad_terms);
            let with_det = g.add(quad, log_det)?;
            let with_const = g.offset(with_det, OBS_DIM as f64 * LN_2PI);
            let step = g.scale(with_const, -0.5);
            ll = Some(match ll {
                None => step,
                Some(acc) => g.add(acc, step)?,
            });
        }
        let ll = match ll {
            Some(v) => v,
            None => {
                let rows = g.shape(positions[0])[0];
                g.constant(Tensor::zeros(rows, 1))
            }
        };
        per_component.push(ll);
    }
    let stacked = g.concat_cols(&per_component)?;
    let lse = g.logsumexp_cols(vars.logits);
    let log_pi = g.sub(vars.logits, lse)?;
    let joint = g.add(stacked, log_pi)?;
    Ok(g.logsumexp_cols(joint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lgssm::{log_marginal, mixture_log_likelihoods, tests::simple_params};
    use crate::numerics::logsumexp;

    #[test]
    fn round_trip_through_raw_parameters() {
        let p = simple_params(0.03, 2);
        let l = LgssmLearnable::from_params(&p).unwrap();
        let back = l.to_params();
        assert!((back.sigma_h.clone() - &p.sigma_h).amax() < 1e-10);
        assert!((back.components[1].cov.clone() - &p.components[1].cov).amax() < 1e-10);
        assert!((back.components[0].weight - 0.5).abs() < 1e-15);
    }

    fn graph_value(p: &LgssmParams, trajs: &[Vec<[f64; 2]>], mask: &[bool]) -> Vec<f64> {
        let l = LgssmLearnable::from_params(p).unwrap();
        let mut g = Graph::new();
        let vars = l.bind(&mut g, false);
        let steps = trajs[0].len();
        let positions: Vec<Var> = (0..steps)
            .map(|t| g.constant(Tensor::from_fn(trajs.len(), 2, |i, d| trajs[i][t][d])))
            .collect();
        let out = log_marginal_graph(&mut g, &vars, &positions, mask).unwrap();
        g.value(out).data().to_vec()
    }

    #[test]
    fn graph_recursion_matches_exact_filter() {
        let p = simple_params(0.02, 2);
        let trajs = vec![
            vec![[0.1, 0.4], [0.2, 0.45], [0.33, 0.48], [0.41, 0.44]],
            vec![[1.1, 0.2], [1.0, 0.35], [0.93, 0.41], [0.85, 0.42]],
        ];
        let mask = [true, false, true, true];
        let got = graph_value(&p, &trajs, &mask);
        for (i, a) in trajs.iter().enumerate() {
            let exact = logsumexp(&mixture_log_likelihoods(&p, a, &mask).unwrap());
            assert!((got[i] - exact).abs() < 1e-9, "{} vs {}", got[i], exact);
        }
        let full = graph_value(&p, &trajs, &[true; 4]);
        let exact = log_marginal(&p, &trajs).unwrap();
        assert!((full.iter().sum::<f64>() - exact).abs() < 1e-9);
    }
}
