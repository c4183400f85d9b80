use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::align::{align, align_similarity, AlignmentResult};
use super::figures::{encode_pgm, overlay, side_by_side, trajectory_svg, Series};
use crate::dataset::{Corpus, ImageSequence};
use crate::error::{Error, Result};
use crate::inference_net::infer;
use crate::lgssm::{kalman_filter, mixture_posterior, positions_to_obs, LgssmParams};
use crate::renderer::{log_likelihood_image, render};
use crate::trainer::Model;

/// Frames observed before generating, and at each end when interpolating.
pub const OBSERVED: usize = 5;

/// Where and for how many sequences figures are written.
#[derive(Debug, Clone)]
pub struct FigureOptions {
    pub dir: PathBuf,
    pub count: usize,
}

fn to_f64(frames: &[Vec<u8>]) -> Vec<Vec<f64>> {
    frames.iter().map(|f| f.iter().map(|&v| v as f64).collect()).collect()
}

fn per_pixel_nll(probs: &[f64], image: &[u8]) -> Result<f64> {
    Ok(-log_likelihood_image(probs, image)? / image.len() as f64)
}

fn column(positions: &[Vec<[f64; 2]>], n: usize) -> Vec<[f64; 2]> {
    positions.iter().map(|r| r[n]).collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

fn render_all(model: &Model, positions: &[Vec<[f64; 2]>]) -> Result<Vec<Vec<f64>>> {
    positions.iter().map(|p| render(&model.renderer, p)).collect()
}

/// Most probable component and filtered rollout for one object's observed
/// positions, extended `horizon` steps past the last observation.
fn rollout(params: &LgssmParams, observed: &[[f64; 2]], horizon: usize) -> Result<(usize, Vec<[f64; 2]>)> {
    let mask = vec![true; observed.len()];
    let k = argmax(&mixture_posterior(params, observed, &mask)?);
    let filtered = kalman_filter(&params.state_space(k)?, &positions_to_obs(observed), &mask)?.filtered;
    let belief = filtered.last().expect("observed steps are non-empty");
    Ok((k, params.forward_generate(belief, horizon)?))
}

fn transpose(per_object: &[Vec<[f64; 2]>]) -> Vec<Vec<[f64; 2]>> {
    let steps = per_object.first().map_or(0, Vec::len);
    (0..steps).map(|t| per_object.iter().map(|o| o[t]).collect()).collect()
}

/// Aligned error of inferred means against true pixel positions. Constant
/// means have no similarity fit; the error is then the spread of the truth
/// around its centroid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionRecord {
    pub task: &'static str,
    pub sequence: usize,
    pub n_objects: usize,
    pub rms: f64,
    pub per_object_rms: Vec<f64>,
    pub scale: Option<f64>,
    pub permutation: Vec<usize>,
    /// Aligned RMS when reflections are also allowed.
    pub rms_with_reflection: Option<f64>,
    /// Mean per-pixel Bernoulli NLL of the frames rendered at the means.
    pub reconstruction_nll: f64,
}

fn centroid_spread(truth: &[Vec<[f64; 2]>]) -> f64 {
    let pts: Vec<[f64; 2]> = truth.iter().flatten().copied().collect();
    let n = pts.len() as f64;
    let c = pts.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
    (pts.iter().map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sum::<f64>() / n).sqrt()
}

fn inferred_means(model: &Model, seq: &ImageSequence) -> Result<Vec<Vec<[f64; 2]>>> {
    Ok(infer(&model.inference, &seq.frames_f64(), seq.n_objects, None)?.means)
}

/// Mean per-pixel NLL of `frames` rendered at the inferred means.
pub fn reconstruction_nll(model: &Model, seq: &ImageSequence) -> Result<f64> {
    let means = inferred_means(model, seq)?;
    let mut total = 0.0;
    for (p, f) in means.iter().zip(&seq.frames) {
        total += per_pixel_nll(&render(&model.renderer, p)?, f)?;
    }
    Ok(total / seq.frames.len() as f64)
}

fn check_corpus(model: &Model, corpus: &Corpus) -> Result<()> {
    if model.inference.pixels() != corpus.pixels() {
        return Err(Error::InvalidArgument(format!(
            "model expects {} pixels, corpus has {}",
            model.inference.pixels(),
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

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

fn truth_series(truth: &[Vec<[f64; 2]>]) -> Vec<Series> {
    (0..truth[0].len()).map(|n| Series { color: "black", points: column(truth, n) }).collect()
}

pub fn position_inference_task(
    model: &Model,
    corpus: &Corpus,
    figures: Option<&FigureOptions>,
) -> Result<Vec<PositionRecord>> {
    check_corpus(model, corpus)?;
    if let Some(f) = figures {
        std::fs::create_dir_all(&f.dir)?;
    }
    corpus
        .sequences
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let means = inferred_means(model, seq)?;
            let truth = seq.pixel_positions(&corpus.transform);
            let mut recon = 0.0;
            for (p, f) in means.iter().zip(&seq.frames) {
                recon += per_pixel_nll(&render(&model.renderer, p)?, f)?;
            }
            let fit = align(&means, &truth).ok();
            let reflected = align_similarity(&means, &truth, true).ok();
            if let (Some(f), Some(a)) = (figures, &fit) {
                if i < f.count {
                    let mapped = a.apply_all(&means);
                    let mut series = truth_series(&truth);
                    series.extend((0..seq.n_objects).map(|n| Series { color: "blue", points: column(&mapped, n) }));
                    write(&f.dir.join(format!("infer_{i:03}.svg")), trajectory_svg(corpus.height, corpus.width, &series).as_bytes())?;
                    let img = overlay(&to_f64(&seq.frames))?;
                    write(&f.dir.join(format!("infer_{i:03}.pgm")), &encode_pgm(&img, corpus.height, corpus.width)?)?;
                }
            }
            Ok(PositionRecord {
                task: "infer",
                sequence: i,
                n_objects: seq.n_objects,
                rms: fit.as_ref().map_or_else(|| centroid_spread(&truth), |a| a.rms),
                per_object_rms: fit.as_ref().map_or_else(Vec::new, |a| a.per_object_rms.clone()),
                scale: fit.as_ref().map(|a| a.scale),
                permutation: fit.as_ref().map_or_else(Vec::new, |a| a.permutation.clone()),
                rms_with_reflection: reflected.map(|a| a.rms),
                reconstruction_nll: recon / seq.frames.len() as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    /// Most probable mixture component per object.
    pub k_star: Vec<usize>,
    /// Inferred means of the observed steps, `[t][n]`.
    pub observed: Vec<Vec<[f64; 2]>>,
    /// Rolled-out position means of the generated steps, `[t][n]`.
    pub positions: Vec<Vec<[f64; 2]>>,
    /// Pixel probabilities of the generated steps.
    pub frames: Vec<Vec<f64>>,
    /// Per-pixel Bernoulli NLL of each generated step against the truth.
    pub nll: Vec<f64>,
}

impl GenerationOutput {
    pub fn mean_nll(&self) -> f64 {
        self.nll.iter().sum::<f64>() / self.nll.len() as f64
    }
}

/// Observe the first [`OBSERVED`] frames and generate the next `horizon`.
pub fn generation_task(model: &Model, frames: &[Vec<u8>], n_objects: usize, horizon: usize) -> Result<GenerationOutput> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("generation horizon must be positive".into()));
    }
    if OBSERVED + horizon > frames.len() {
        return Err(Error::InvalidArgument(format!(
            "{OBSERVED} observed plus {horizon} generated steps exceed the {} available frames",
            frames.len()
        )));
    }
    let observed = infer(&model.inference, &to_f64(&frames[..OBSERVED]), n_objects, None)?.means;
    let params = model.lgssm.to_params();
    let mut k_star = Vec::with_capacity(n_objects);
    let mut tracks = Vec::with_capacity(n_objects);
    for n in 0..n_objects {
        let (k, track) = rollout(&params, &column(&observed, n), horizon)?;
        k_star.push(k);
        tracks.push(track);
    }
    let positions = transpose(&tracks);
    let probs = render_all(model, &positions)?;
    let nll = probs
        .iter()
        .zip(&frames[OBSERVED..OBSERVED + horizon])
        .map(|(p, f)| per_pixel_nll(p, f))
        .collect::<Result<_>>()?;
    Ok(GenerationOutput { k_star, observed, positions, frames: probs, nll })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationOutput {
    /// Component chosen from both observed windows, per object.
    pub k_star: Vec<usize>,
    /// Forward-generated positions of the missing steps, `[t][n]`.
    pub generated: Vec<Vec<[f64; 2]>>,
    /// Inferred means of the leading and trailing windows.
    pub head: Vec<Vec<[f64; 2]>>,
    pub tail: Vec<Vec<[f64; 2]>>,
    /// Smoothed positions for every step, `[t][n]`.
    pub positions: Vec<Vec<[f64; 2]>>,
    /// Pixel probabilities rendered at the smoothed positions.
    pub frames: Vec<Vec<f64>>,
}

/// Observe the first and last [`OBSERVED`] frames and fill in the rest.
pub fn interpolation_task(model: &Model, frames: &[Vec<u8>], n_objects: usize) -> Result<InterpolationOutput> {
    let steps = frames.len();
    if steps <= 2 * OBSERVED {
        return Err(Error::InvalidArgument(format!("interpolation needs more than {} frames", 2 * OBSERVED)));
    }
    let gap = steps - 2 * OBSERVED;
    let params = model.lgssm.to_params();
    let head_frames = to_f64(&frames[..OBSERVED]);
    let head = infer(&model.inference, &head_frames, n_objects, None)?.means;
    let tracks = (0..n_objects)
        .map(|n| Ok(rollout(&params, &column(&head, n), gap)?.1))
        .collect::<Result<Vec<_>>>()?;
    let generated = transpose(&tracks);

    let mut warm = head_frames;
    warm.extend(render_all(model, &generated)?);
    let warm_states = infer(&model.inference, &warm, n_objects, None)?.states.pop().expect("non-empty");
    let tail = infer(&model.inference, &to_f64(&frames[steps - OBSERVED..]), n_objects, Some(&warm_states))?.means;

    let mask: Vec<bool> = (0..steps).map(|t| t < OBSERVED || t >= steps - OBSERVED).collect();
    let mut k_star = Vec::with_capacity(n_objects);
    let mut smoothed = Vec::with_capacity(n_objects);
    for n in 0..n_objects {
        let obs: Vec<[f64; 2]> = (0..steps)
            .map(|t| match t {
                t if t < OBSERVED => head[t][n],
                t if t >= steps - OBSERVED => tail[t + OBSERVED - steps][n],
                _ => [0.0, 0.0],
            })
            .collect();
        let k = argmax(&mixture_posterior(&params, &obs, &mask)?);
        smoothed.push(params.interpolate_missing(&obs, &mask, k)?);
        k_star.push(k);
    }
    let positions = transpose(&smoothed);
    let frames = render_all(model, &positions)?;
    Ok(InterpolationOutput { k_star, generated, head, tail, positions, frames })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationRecord {
    pub task: &'static str,
    pub sequence: usize,
    pub n_objects: usize,
    pub mean_nll: f64,
    pub nll: Vec<f64>,
    pub k_star: Vec<usize>,
}

pub fn generation_report(
    model: &Model,
    corpus: &Corpus,
    horizon: usize,
    figures: Option<&FigureOptions>,
) -> Result<Vec<GenerationRecord>> {
    check_corpus(model, corpus)?;
    if let Some(f) = figures {
        std::fs::create_dir_all(&f.dir)?;
    }
    corpus
        .sequences
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let out = generation_task(model, &seq.frames, seq.n_objects, horizon)?;
            if let Some(f) = figures.filter(|f| i < f.count) {
                let truth = overlay(&to_f64(&seq.frames[OBSERVED..OBSERVED + horizon]))?;
                let generated = overlay(&out.frames)?;
                let (img, w) = side_by_side(&[truth, generated], corpus.height, corpus.width, 2)?;
                write(&f.dir.join(format!("generate_{i:03}.pgm")), &encode_pgm(&img, corpus.height, w)?)?;
            }
            Ok(GenerationRecord {
                task: "generate",
                sequence: i,
                n_objects: seq.n_objects,
                mean_nll: out.mean_nll(),
                nll: out.nll,
                k_star: out.k_star,
            })
        })
        .collect()
}

/// Aligned errors over the missing steps. The similarity transform is fitted
/// on the inferred means of the full sequence and shared by both trajectories.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterpolationRecord {
    pub task: &'static str,
    pub sequence: usize,
    pub n_objects: usize,
    pub generated_rms: f64,
    pub interpolated_rms: f64,
    pub k_star: Vec<usize>,
}

pub fn interpolation_report(
    model: &Model,
    corpus: &Corpus,
    figures: Option<&FigureOptions>,
) -> Result<Vec<InterpolationRecord>> {
    check_corpus(model, corpus)?;
    if let Some(f) = figures {
        std::fs::create_dir_all(&f.dir)?;
    }
    corpus
        .sequences
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let out = interpolation_task(model, &seq.frames, seq.n_objects)?;
            let truth = seq.pixel_positions(&corpus.transform);
            let fit: AlignmentResult = align(&inferred_means(model, seq)?, &truth)?;
            let missing = OBSERVED..seq.steps() - OBSERVED;
            let generated_rms = fit.residual(&out.generated, &truth[missing.clone()]);
            let interpolated_rms = fit.residual(&out.positions[missing.clone()], &truth[missing.clone()]);
            if let Some(f) = figures.filter(|f| i < f.count) {
                let mut series = truth_series(&truth);
                let gen = fit.apply_all(&out.generated);
                let interp = fit.apply_all(&out.positions);
                for n in 0..seq.n_objects {
                    series.push(Series { color: "red", points: column(&gen, n) });
                    series.push(Series { color: "blue", points: column(&interp, n) });
                }
                write(&f.dir.join(format!("interpolate_{i:03}.svg")), trajectory_svg(corpus.height, corpus.width, &series).as_bytes())?;
                let t = overlay(&to_f64(&seq.frames))?;
                let m = overlay(&out.frames)?;
                let (img, w) = side_by_side(&[t, m], corpus.height, corpus.width, 2)?;
                write(&f.dir.join(format!("interpolate_{i:03}.pgm")), &encode_pgm(&img, corpus.height, w)?)?;
            }
            Ok(InterpolationRecord {
                task: "interpolate",
                sequence: i,
                n_objects: seq.n_objects,
                generated_rms,
                interpolated_rms,
                k_star: out.k_star,
            })
        })
        .collect()
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `wins + losses` fair coin flips.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let ln_choose = |k: usize| -> f64 { (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum() };
    (wins..=n).map(|k| (ln_choose(k) - n as f64 * std::f64::consts::LN_2).exp()).sum::<f64>().min(1.0)
}
