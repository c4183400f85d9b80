use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Similarity transform `p ↦ scale · R p + t` from inferred to true
/// coordinates, together with the object matching it was fitted under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub rotation: [[f64; 2]; 2],
    pub scale: f64,
    pub translation: [f64; 2],
    /// `permutation[n]` is the inferred object matched to true object `n`.
    pub permutation: Vec<usize>,
    /// RMS distance over all aligned points.
    pub rms: f64,
    /// RMS distance per true object.
    pub per_object_rms: Vec<f64>,
}

impl AlignmentResult {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let r = &self.rotation;
        [
            self.scale * (r[0][0] * p[0] + r[0][1] * p[1]) + self.translation[0],
            self.scale * (r[1][0] * p[0] + r[1][1] * p[1]) + self.translation[1],
        ]
    }

    /// Map inferred `[t][n]` positions into true coordinates, reordered to
    /// the true object order.
    pub fn apply_all(&self, inferred: &[Vec<[f64; 2]>]) -> Vec<Vec<[f64; 2]>> {
        inferred
            .iter()
            .map(|row| self.permutation.iter().map(|&k| self.apply(row[k])).collect())
            .collect()
    }

    /// RMS distance between mapped `inferred` and `truth`, both `[t][n]`.
    pub fn residual(&self, inferred: &[Vec<[f64; 2]>], truth: &[Vec<[f64; 2]>]) -> f64 {
        let mapped = self.apply_all(inferred);
        let mut sum = 0.0;
        let mut count = 0usize;
        for (m, t) in mapped.iter().zip(truth) {
            for (p, q) in m.iter().zip(t) {
                sum += (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                count += 1;
            }
        }
        (sum / count.max(1) as f64).sqrt()
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

struct Fit {
    rotation: Matrix2<f64>,
    scale: f64,
    translation: [f64; 2],
}

/// Least-squares similarity transform taking `x` onto `y`.
fn fit_similarity(x: &[[f64; 2]], y: &[[f64; 2]], allow_reflection: bool) -> Result<Fit> {
    let n = x.len() as f64;
    let mean = |p: &[[f64; 2]]| {
        let s = p.iter().fold([0.0, 0.0], |a, q| [a[0] + q[0], a[1] + q[1]]);
        [s[0] / n, s[1] / n]
    };
    let (mx, my) = (mean(x), mean(y));
    let mut cov = Matrix2::<f64>::zeros();
    let mut var_x = 0.0;
    for (p, q) in x.iter().zip(y) {
        let xc = [p[0] - mx[0], p[1] - mx[1]];
        let yc = [q[0] - my[0], q[1] - my[1]];
        for i in 0..2 {
            for j in 0..2 {
                cov[(i, j)] += yc[i] * xc[j];
            }
        }
        var_x += xc[0] * xc[0] + xc[1] * xc[1];
    }
    let scale_ref = x.iter().chain(y).flat_map(|p| p.iter()).fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    if !(var_x > 1e-24 * scale_ref * scale_ref * n) {
        return Err(Error::InvalidArgument("inferred positions are all identical".into()));
    }
    let svd = Matrix2::<f64>::svd(cov, true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut d = Matrix2::<f64>::identity();
    if !allow_reflection && (u * v_t).determinant() < 0.0 {
        d[(1, 1)] = -1.0;
    }
    let rotation = u * d * v_t;
    let trace: f64 = (0..2).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = trace / var_x;
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument("alignment has no positive scale".into()));
    }
    let rx = rotation * nalgebra::Vector2::new(mx[0], mx[1]);
    Ok(Fit { rotation, scale, translation: [my[0] - scale * rx[0], my[1] - scale * rx[1]] })
}

/// Procrustes alignment of `inferred` onto `truth` (both `[t][n]`) with
/// uniform scale, no reflection, and an exhaustive search over object
/// matchings.
pub fn align(inferred: &[Vec<[f64; 2]>], truth: &[Vec<[f64; 2]>]) -> Result<AlignmentResult> {
    align_similarity(inferred, truth, false)
}

pub fn align_similarity(
    inferred: &[Vec<[f64; 2]>],
    truth: &[Vec<[f64; 2]>],
    allow_reflection: bool,
) -> Result<AlignmentResult> {
    let n_objects = truth.first().map_or(0, |r| r.len());
    let same_shape = inferred.len() == truth.len()
        && inferred.iter().zip(truth).all(|(a, b)| a.len() == n_objects && b.len() == n_objects);
    if !same_shape || n_objects == 0 || truth.is_empty() {
        return Err(Error::Shape("inferred and true trajectories must both be non-empty T×N".into()));
    }
    if n_objects > 8 {
        return Err(Error::InvalidArgument(format!("exhaustive matching over {n_objects} objects is too large")));
    }
    let mut best: Option<AlignmentResult> = None;
    for perm in permutations(n_objects) {
        let x: Vec<[f64; 2]> = inferred.iter().flat_map(|row| perm.iter().map(move |&k| row[k])).collect();
        let y: Vec<[f64; 2]> = truth.iter().flat_map(|row| row.iter().copied()).collect();
        let fit = fit_similarity(&x, &y, allow_reflection)?;
        let r = fit.rotation;
        let mut result = AlignmentResult {
            rotation: [[r[(0, 0)], r[(0, 1)]], [r[(1, 0)], r[(1, 1)]]],
            scale: fit.scale,
            translation: fit.translation,
            permutation: perm,
            rms: 0.0,
            per_object_rms: Vec::new(),
        };
        let mapped = result.apply_all(inferred);
        let mut per = vec![0.0; n_objects];
        for (m, t) in mapped.iter().zip(truth) {
            for (k, (p, q)) in m.iter().zip(t).enumerate() {
                per[k] += (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            }
        }
        let steps = truth.len() as f64;
        result.rms = (per.iter().sum::<f64>() / (steps * n_objects as f64)).sqrt();
        result.per_object_rms = per.iter().map(|s| (s / steps).sqrt()).collect();
        if best.as_ref().map_or(true, |b| result.rms < b.rms) {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one permutation"))
}
