//! Cannonball corpus: Newtonian trajectories, a corpus-global rescale into
//! pixel coordinates, disc rasterization, and the `PDY1` file format.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lgssm::{sample_trajectory, LgssmParams, MixtureComponent, Trajectory};

const MAGIC: &[u8; 4] = b"PDY1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub radius: usize,
    pub object_counts: Vec<usize>,
    pub train_per_count: usize,
    pub test_per_count: usize,
    pub seed: u64,
    pub delta: f64,
    pub gravity: f64,
    /// Per-axis variance of the position noise.
    pub position_noise: f64,
    pub angle_deg: [f64; 2],
    pub speed: [f64; 2],
    pub y_start: [f64; 2],
    pub x_left: [f64; 2],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::full48()
    }
}

impl DatasetConfig {
    pub fn full48() -> Self {
        Self {
            steps: 30,
            height: 48,
            width: 48,
            radius: 2,
            object_counts: vec![1, 2, 3],
            train_per_count: 5000,
            test_per_count: 500,
            seed: 0,
            delta: 0.015,
            gravity: 9.81,
            position_noise: 0.001,
            angle_deg: [40.0, 60.0],
            speed: [2.0, 3.0],
            y_start: [-0.5, 0.5],
            x_left: [-0.5, -0.1],
        }
    }

    pub fn desk32() -> Self {
        Self {
            height: 32,
            width: 32,
            object_counts: vec![1, 2],
            train_per_count: 2500,
            test_per_count: 50,
            ..Self::full48()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full48" => Ok(Self::full48()),
            "desk32" => Ok(Self::desk32()),
            other => Err(Error::InvalidArgument(format!("unknown dataset preset '{other}'"))),
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.radius < 1 {
            return fail("radius must be at least 1");
        }
        if 2 * self.radius + 1 >= self.height.min(self.width) {
            return fail("disc diameter must be smaller than the image");
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize || self.steps > u16::MAX as usize {
            return fail("dimensions must fit in 16 bits");
        }
        if !(self.delta > 0.0) {
            return fail("sampling period must be positive");
        }
        if self.steps < 1 {
            return fail("sequences need at least one step");
        }
        if self.object_counts.is_empty() || self.object_counts.iter().any(|&n| n == 0 || n > u8::MAX as usize) {
            return fail("object counts must be in 1..=255");
        }
        if !(self.position_noise >= 0.0) {
            return fail("position noise variance must be non-negative");
        }
        Ok(())
    }

    /// `−g (0, ½δ², 0, δ)`.
    pub fn force(&self) -> [f64; 4] {
        let (g, d) = (self.gravity, self.delta);
        [0.0, -g * 0.5 * d * d, 0.0, -g * d]
    }

    /// Largest x-displacement over a sequence: fastest speed at the flattest angle.
    pub fn max_x(&self) -> f64 {
        (self.steps - 1) as f64 * self.delta * self.speed[1] * self.angle_deg[0].to_radians().cos()
    }

    pub fn x_interval(&self, side: Side) -> [f64; 2] {
        match side {
            Side::Left => self.x_left,
            Side::Right => {
                let shift = 0.9 * self.max_x();
                [self.x_left[0] + shift, self.x_left[1] + shift]
            }
        }
    }

    fn dynamics(&self, initial: [f64; 4]) -> LgssmParams {
        LgssmParams {
            delta: self.delta,
            force: DVector::from_row_slice(&self.force()),
            sigma_h: DMatrix::zeros(4, 4),
            sigma_a: DMatrix::identity(2, 2) * self.position_noise,
            components: vec![MixtureComponent {
                weight: 1.0,
                mean: DVector::from_row_slice(&initial),
                cov: DMatrix::zeros(4, 4),
            }],
        }
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// One launched ball: position from the side interval, speed and angle
/// sampled uniformly, x-velocity negated on the right.
pub fn generate_trajectory(config: &DatasetConfig, rng: &mut impl Rng, side: Side) -> Result<Trajectory> {
    let [x0, x1] = config.x_interval(side);
    let x = uniform(rng, [x0, x1]);
    let y = uniform(rng, config.y_start);
    let angle = uniform(rng, config.angle_deg).to_radians();
    let speed = uniform(rng, config.speed);
    let sign = if side == Side::Right { -1.0 } else { 1.0 };
    let initial = [x, y, sign * speed * angle.cos(), speed * angle.sin()];
    sample_trajectory(&config.dynamics(initial), config.steps, rng, Some(0))
}

/// Per-axis affine map from world units to pixel units, `p ↦ scale·p + offset`,
/// with pixel y pointing up (row = H − 1 − y).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RescaleTransform {
    pub scale: [f64; 2],
    pub offset: [f64; 2],
}

impl RescaleTransform {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [self.scale[0] * p[0] + self.offset[0], self.scale[1] * p[1] + self.offset[1]]
    }

    pub fn invert(&self, q: [f64; 2]) -> [f64; 2] {
        [(q[0] - self.offset[0]) / self.scale[0], (q[1] - self.offset[1]) / self.scale[1]]
    }
}

/// Fit the map sending the extent of `positions` onto `[R, W−1−R] × [R, H−1−R]`.
pub fn rescale(config: &DatasetConfig, positions: impl IntoIterator<Item = [f64; 2]>) -> Result<RescaleTransform> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in positions {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let r = config.radius as f64;
    let target = [
        [r, config.width as f64 - 1.0 - r],
        [r, config.height as f64 - 1.0 - r],
    ];
    let mut scale = [0.0; 2];
    let mut offset = [0.0; 2];
    for d in 0..2 {
        if !(hi[d] > lo[d]) || !(hi[d] - lo[d]).is_finite() {
            return Err(Error::InvalidArgument(format!("degenerate extent along axis {d}: [{}, {}]", lo[d], hi[d])));
        }
        scale[d] = (target[d][1] - target[d][0]) / (hi[d] - lo[d]);
        offset[d] = target[d][0] - scale[d] * lo[d];
    }
    Ok(RescaleTransform { scale, offset })
}

/// Binary `H × W` image of the union of radius-`R` discs around the
/// rounded pixel-space centers `(x, y)`.
pub fn rasterize(centers: &[[f64; 2]], radius: usize, height: usize, width: usize) -> Result<Vec<u8>> {
    let mut image = vec![0u8; height * width];
    let r = radius as f64;
    for &[x, y] in centers {
        let fits = |v: f64, n: usize| v.is_finite() && v >= r - 0.5 && v < n as f64 - 0.5 - r;
        if !fits(x, width) || !fits(y, height) {
            return Err(Error::InvalidArgument(format!("disc center ({x}, {y}) leaves the image")));
        }
        let col = x.round() as i64;
        let row = (height as f64 - 1.0 - y.round()) as i64;
        let ri = radius as i64;
        for di in -ri..=ri {
            for dj in -ri..=ri {
                if di * di + dj * dj <= ri * ri {
                    image[(row + di) as usize * width + (col + dj) as usize] = 1;
                }
            }
        }
    }
    Ok(image)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSequence {
    pub n_objects: usize,
    /// Ground-truth latent states in world units, `[t][n]`.
    pub h: Vec<Vec<[f64; 4]>>,
    /// Noisy positions in world units, `[t][n]`.
    pub a: Vec<Vec<[f64; 2]>>,
    /// Row-major binary frames, one byte per pixel.
    pub frames: Vec<Vec<u8>>,
}

impl ImageSequence {
    pub fn steps(&self) -> usize {
        self.frames.len()
    }

    /// Frames as floats for the networks.
    pub fn frames_f64(&self) -> Vec<Vec<f64>> {
        self.frames.iter().map(|f| f.iter().map(|&v| v as f64).collect()).collect()
    }

    /// Noisy positions in pixel units.
    pub fn pixel_positions(&self, transform: &RescaleTransform) -> Vec<Vec<[f64; 2]>> {
        self.a.iter().map(|row| row.iter().map(|&p| transform.apply(p)).collect()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub radius: usize,
    pub transform: RescaleTransform,
    pub sequences: Vec<ImageSequence>,
}

impl Corpus {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn object_counts(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.sequences.iter().map(|s| s.n_objects).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Training and test corpora sharing one rescale transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Corpus,
    pub test: Corpus,
}

fn sequence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generate the corpus; sequence `i` uses its own stream of `seed`, so the
/// output does not depend on the thread count.
pub fn generate(config: &DatasetConfig) -> Result<Split> {
    config.validate()?;
    let mut plan = Vec::new();
    for (is_test, per_count) in [(false, config.train_per_count), (true, config.test_per_count)] {
        for &n in &config.object_counts {
            plan.extend((0..per_count).map(|_| (is_test, n)));
        }
    }
    let raw: Vec<(bool, usize, Vec<Trajectory>)> = plan
        .par_iter()
        .enumerate()
        .map(|(i, &(is_test, n))| {
            let mut rng = sequence_rng(config.seed, i as u64);
            let trajs = (0..n)
                .map(|_| {
                    let side = if rng.gen_bool(0.5) { Side::Left } else { Side::Right };
                    generate_trajectory(config, &mut rng, side)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((is_test, n, trajs))
        })
        .collect::<Result<_>>()?;

    let transform = rescale(config, raw.iter().flat_map(|(_, _, ts)| ts.iter().flat_map(|t| t.a.iter().copied())))?;
    let sequences: Vec<(bool, ImageSequence)> = raw
        .into_par_iter()
        .map(|(is_test, n, trajs)| {
            let steps = config.steps;
            let h = (0..steps).map(|t| trajs.iter().map(|tr| tr.h[t]).collect()).collect();
            let a: Vec<Vec<[f64; 2]>> = (0..steps).map(|t| trajs.iter().map(|tr| tr.a[t]).collect()).collect();
            let frames = a
                .iter()
                .map(|row| {
                    let centers: Vec<[f64; 2]> = row.iter().map(|&p| transform.apply(p)).collect();
                    rasterize(&centers, config.radius, config.height, config.width)
                })
                .collect::<Result<_>>()?;
            Ok((is_test, ImageSequence { n_objects: n, h, a, frames }))
        })
        .collect::<Result<_>>()?;

    let corpus = |want: bool| Corpus {
        steps: config.steps,
        height: config.height,
        width: config.width,
        radius: config.radius,
        transform,
        sequences: sequences.iter().filter(|(t, _)| *t == want).map(|(_, s)| s.clone()).collect(),
    };
    Ok(Split { train: corpus(false), test: corpus(true) })
}

/// Serialize to the `PDY1` layout with a trailing CRC32 of every preceding byte.
pub fn encode(corpus: &Corpus) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(corpus.sequences.len()).map_err(|_| Error::Format("too many sequences".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for v in [corpus.steps, corpus.height, corpus.width, corpus.radius] {
        let v = u16::try_from(v).map_err(|_| Error::Format(format!("header field {v} exceeds 16 bits")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let t = &corpus.transform;
    for v in [t.scale[0], t.scale[1], t.offset[0], t.offset[1]] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let pixels = corpus.pixels();
    for (i, s) in corpus.sequences.iter().enumerate() {
        let consistent = s.frames.len() == corpus.steps
            && s.h.len() == corpus.steps
            && s.a.len() == corpus.steps
            && s.h.iter().all(|r| r.len() == s.n_objects)
            && s.a.iter().all(|r| r.len() == s.n_objects)
            && s.frames.iter().all(|f| f.len() == pixels && f.iter().all(|&b| b <= 1));
        if !consistent || s.n_objects == 0 || s.n_objects > u8::MAX as usize {
            return Err(Error::Format(format!("sequence {i} does not match the corpus header")));
        }
        buf.push(s.n_objects as u8);
        for row in &s.h {
            for v in row.iter().flatten() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for row in &s.a {
            for v in row.iter().flatten() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for f in &s.frames {
            buf.extend_from_slice(f);
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Corpus> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    if bytes.len() < 8 {
        return Err(Error::Format("truncated header".into()));
    }
    let body_len = bytes
        .len()
        .checked_sub(4)
        .ok_or_else(|| Error::Format("truncated file".into()))?;
    let mut c = Cursor { data: &bytes[..body_len], pos: 4 };
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[..body_len]);
    if stored != actual {
        return Err(Error::Format(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let count = c.u32()? as usize;
    let steps = c.u16()? as usize;
    let height = c.u16()? as usize;
    let width = c.u16()? as usize;
    let radius = c.u16()? as usize;
    let transform = RescaleTransform { scale: [c.f64()?, c.f64()?], offset: [c.f64()?, c.f64()?] };
    let pixels = height * width;
    let mut sequences = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let n = c.take(1)?[0] as usize;
        if n == 0 {
            return Err(Error::Format(format!("sequence {i} has no objects")));
        }
        let mut h = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut row = Vec::with_capacity(n);
            for _ in 0..n {
                row.push([c.f64()?, c.f64()?, c.f64()?, c.f64()?]);
            }
            h.push(row);
        }
        let mut a = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut row = Vec::with_capacity(n);
            for _ in 0..n {
                row.push([c.f64()?, c.f64()?]);
            }
            a.push(row);
        }
        let mut frames = Vec::with_capacity(steps);
        for _ in 0..steps {
            let f = c.take(pixels)?;
            if f.iter().any(|&b| b > 1) {
                return Err(Error::Format(format!("sequence {i} has a non-binary pixel")));
            }
            frames.push(f.to_vec());
        }
        sequences.push(ImageSequence { n_objects: n, h, a, frames });
    }
    if c.pos != body_len {
        return Err(Error::Format(format!("{} trailing bytes after the last sequence", body_len - c.pos)));
    }
    Ok(Corpus { steps, height, width, radius, transform, sequences })
}

pub fn write_dataset(path: &Path, corpus: &Corpus) -> Result<()> {
    let bytes = encode(corpus)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Corpus> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
