use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Time overlay: pixel value `max_t (t/T) · frame_t` with `t` counted from 1.
pub fn overlay(frames: &[Vec<f64>]) -> Result<Vec<f64>> {
    let pixels = frames.first().map(Vec::len).ok_or_else(|| Error::InvalidArgument("no frames to overlay".into()))?;
    let steps = frames.len() as f64;
    let mut out = vec![0.0f64; pixels];
    for (t, f) in frames.iter().enumerate() {
        if f.len() != pixels {
            return Err(Error::Shape("overlay frames differ in size".into()));
        }
        let shade = (t + 1) as f64 / steps;
        for (o, &v) in out.iter_mut().zip(f) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("frame value {v} outside [0, 1]")));
            }
            *o = o.max(shade * v);
        }
    }
    Ok(out)
}

/// Place equally sized panels left to right with `gap` mid-gray columns
/// between them. Returns the combined image and its width.
pub fn side_by_side(panels: &[Vec<f64>], height: usize, width: usize, gap: usize) -> Result<(Vec<f64>, usize)> {
    if panels.is_empty() || panels.iter().any(|p| p.len() != height * width) {
        return Err(Error::Shape(format!("panels must be non-empty {height}x{width} images")));
    }
    let total = panels.len() * width + (panels.len() - 1) * gap;
    let mut out = vec![0.5; height * total];
    for (k, p) in panels.iter().enumerate() {
        let left = k * (width + gap);
        for i in 0..height {
            out[i * total + left..i * total + left + width].copy_from_slice(&p[i * width..(i + 1) * width]);
        }
    }
    Ok((out, total))
}

/// Binary PGM (P5) with maxval 255; values in `[0, 1]` are scaled and rounded.
pub fn encode_pgm(pixels: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if pixels.len() != height * width || pixels.is_empty() {
        return Err(Error::Shape(format!("{} pixels for a {height}x{width} image", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Parse a P5 image written by [`encode_pgm`] into `(height, width, bytes)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Format("not a binary PGM image".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    let body = &bytes[(pos + 1).min(bytes.len())..];
    let width: usize = fields[1].parse().map_err(|_| bad())?;
    let height: usize = fields[2].parse().map_err(|_| bad())?;
    if fields[0] != "P5" || fields[3] != "255" || body.len() != width * height {
        return Err(bad());
    }
    Ok((height, width, body.to_vec()))
}

/// One polyline of a trajectory plot, in pixel coordinates with y up.
#[derive(Debug, Clone)]
pub struct Series {
    pub color: &'static str,
    pub points: Vec<[f64; 2]>,
}

/// SVG line plot over an `height × width` pixel frame.
pub fn trajectory_svg(height: usize, width: usize, series: &[Series]) -> String {
    let scale = 10.0;
    let (w, h) = (width as f64 * scale, height as f64 * scale);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white" stroke="gray"/>"#);
    let to_svg = |p: &[f64; 2]| ((p[0] + 0.5) * scale, (height as f64 - 0.5 - p[1]) * scale);
    for line in series {
        let pts: Vec<String> = line
            .points
            .iter()
            .map(|p| {
                let (x, y) = to_svg(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            line.color,
            pts.join(" ")
        );
        for p in &line.points {
            let (x, y) = to_svg(p);
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{}"/>"#, line.color);
        }
    }
    s.push_str("</svg>\n");
    s
}
