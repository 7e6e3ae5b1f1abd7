//! Training-data synthesis: corruption masks, fill content and blending.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::rng::SplitMix64;

/// Number of area intervals: `[0, 0.1), ..., [0.5, 0.6]`.
pub const AREA_INTERVALS: usize = 6;
/// Largest admissible mask area fraction.
pub const MAX_AREA: f64 = 0.6;

const REJECTION_LIMIT: usize = 10_000;

/// Brush-walk parameters in pixels at a 256-pixel frame; scaled with the frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrushParams {
    pub min_vertices: usize,
    pub max_vertices: usize,
    pub max_turn: f64,
    pub min_length: f64,
    pub max_length: f64,
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for BrushParams {
    fn default() -> Self {
        Self {
            min_vertices: 4,
            max_vertices: 12,
            max_turn: 2.0 * PI / 5.0,
            min_length: 10.0,
            max_length: 40.0,
            min_radius: 5.0,
            max_radius: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskKind {
    Block,
    Freeform { strokes: usize, brush: BrushParams },
    File(std::path::PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// Accepted area interval index, if restricted.
    pub area_interval: Option<usize>,
    pub seed: u64,
}

impl MaskSpec {
    /// Generates a mask for `frame`; file masks are loaded by the caller.
    pub fn generate(&self, frame: (usize, usize)) -> Result<BinaryMask> {
        let accept = |m: &BinaryMask| match self.area_interval {
            Some(i) => classify_area(m).is_ok_and(|c| c == i),
            None => true,
        };
        for attempt in 0..REJECTION_LIMIT as u64 {
            let seed = self.seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9));
            let m = match &self.kind {
                MaskKind::Block => gen_block_mask(frame, seed),
                MaskKind::Freeform { strokes, brush } => gen_freeform_mask_with(frame, seed, *strokes, brush)?,
                MaskKind::File(p) => {
                    return Err(Error::Unsupported(format!("mask file {} must be loaded, not generated", p.display())))
                }
            };
            if accept(&m) {
                return Ok(m);
            }
        }
        Err(Error::Contract(format!(
            "no mask in interval {:?} after {REJECTION_LIMIT} attempts",
            self.area_interval
        )))
    }
}

/// One `H/2 x W/2` block at a uniformly random position.
pub fn gen_block_mask(frame: (usize, usize), seed: u64) -> BinaryMask {
    let (h, w) = frame;
    let (bh, bw) = (h / 2, w / 2);
    let mut rng = SplitMix64::new(seed);
    let y0 = rng.range_inclusive(0, h - bh);
    let x0 = rng.range_inclusive(0, w - bw);
    BinaryMask::from_fn(h, w, |y, x| (y0..y0 + bh).contains(&y) && (x0..x0 + bw).contains(&x))
}

pub fn gen_freeform_mask(frame: (usize, usize), seed: u64, strokes: usize) -> Result<BinaryMask> {
    gen_freeform_mask_with(frame, seed, strokes, &BrushParams::default())
}

/// Random brush strokes, resampled until the area lies in `(0, 0.6]`.
pub fn gen_freeform_mask_with(frame: (usize, usize), seed: u64, strokes: usize, brush: &BrushParams) -> Result<BinaryMask> {
    if strokes == 0 {
        return Err(Error::Contract("freeform mask needs at least one stroke".into()));
    }
    let mut rng = SplitMix64::new(seed);
    for _ in 0..REJECTION_LIMIT {
        let m = brush_walk(frame, &mut rng, strokes, brush);
        let f = m.area_fraction();
        if f > 0.0 && f <= MAX_AREA {
            return Ok(m);
        }
    }
    Err(Error::Contract("freeform mask rejection sampling did not converge".into()))
}

fn brush_walk(frame: (usize, usize), rng: &mut SplitMix64, strokes: usize, b: &BrushParams) -> BinaryMask {
    let (h, w) = frame;
    let scale = h.min(w) as f64 / 256.0;
    let mut m = BinaryMask::zeros(h, w);
    for _ in 0..strokes {
        let mut y = rng.uniform(0.0, h as f64);
        let mut x = rng.uniform(0.0, w as f64);
        let vertices = rng.range_inclusive(b.min_vertices, b.max_vertices);
        let drift = rng.uniform(0.0, 2.0 * PI);
        let radius = (rng.uniform(b.min_radius, b.max_radius) * scale).max(0.5);
        stamp(&mut m, y, x, radius);
        for v in 0..vertices {
            let turn = rng.uniform(0.0, b.max_turn);
            let angle = if v % 2 == 0 { drift + turn } else { drift - turn };
            let len = rng.uniform(b.min_length, b.max_length) * scale;
            let (ny, nx) = (
                (y + len * angle.sin()).clamp(0.0, (h - 1) as f64),
                (x + len * angle.cos()).clamp(0.0, (w - 1) as f64),
            );
            let steps = ((len / (radius * 0.5)).ceil() as usize).max(1);
            for s in 1..=steps {
                let t = s as f64 / steps as f64;
                stamp(&mut m, y + (ny - y) * t, x + (nx - x) * t, radius);
            }
            y = ny;
            x = nx;
        }
    }
    m
}

fn stamp(m: &mut BinaryMask, cy: f64, cx: f64, r: f64) {
    let (h, w) = (m.height() as isize, m.width() as isize);
    let y0 = ((cy - r).floor() as isize).max(0);
    let y1 = ((cy + r).ceil() as isize).min(h - 1);
    let x0 = ((cx - r).floor() as isize).max(0);
    let x1 = ((cx + r).ceil() as isize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            if dy * dy + dx * dx <= r * r {
                m.set(y as usize, x as usize, true);
            }
        }
    }
}

/// Area interval `0..6` of a mask; fractions above 0.6 are out of protocol.
pub fn classify_area(mask: &BinaryMask) -> Result<usize> {
    let total = mask.height() * mask.width();
    let count = mask.count();
    // Integer binning avoids rounding at interval edges.
    if count * 10 > 6 * total {
        return Err(Error::OutOfProtocol(mask.area_fraction()));
    }
    Ok(((count * 10) / total.max(1)).min(AREA_INTERVALS - 1))
}

#[derive(Debug, Clone, PartialEq)]
pub enum FillSource {
    Constant(f64),
    Image(Image),
}

impl FillSource {
    pub fn constant(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Contract(format!("constant fill {value} outside [0, 1]")));
        }
        Ok(Self::Constant(value))
    }

    /// Fill content at the frame size of `like`.
    pub fn render(&self, like: &Image) -> Image {
        let (h, w, c) = (like.height(), like.width(), like.channels());
        match self {
            Self::Constant(v) => Image::filled(h, w, c, *v),
            Self::Image(img) => {
                let img = if img.height() == h && img.width() == w {
                    img.clone()
                } else {
                    img.resize_bilinear(h, w)
                };
                match (img.channels(), c) {
                    (a, b) if a == b => img,
                    (1, 3) => img.to_rgb(),
                    _ => Image::from_fn(h, w, 1, |y, x, _| img.get(y, x, 0)),
                }
            }
        }
    }
}

fn check_frame(img: &Image, mask: &BinaryMask) -> Result<()> {
    if img.height() != mask.height() || img.width() != mask.width() {
        return Err(Error::contract(format!(
            "image {}x{} vs mask {}x{}",
            img.height(),
            img.width(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// `gt * (1 - m) + fill * m`.
pub fn blend(gt: &Image, mask: &BinaryMask, fill: &FillSource) -> Result<Image> {
    check_frame(gt, mask)?;
    let fill = fill.render(gt);
    let c = gt.channels();
    let mut out = gt.clone();
    for (i, px) in out.data_mut().chunks_mut(c).enumerate() {
        if mask.data()[i] == 1.0 {
            px.copy_from_slice(&fill.data()[i * c..(i + 1) * c]);
        }
    }
    Ok(out)
}

/// Corrupted image with the detected region painted white: `x * (1 - m) + m`.
pub fn binary_masked(image: &Image, mask: &BinaryMask) -> Result<Image> {
    check_frame(image, mask)?;
    let c = image.channels();
    let mut out = image.clone();
    for (i, px) in out.data_mut().chunks_mut(c).enumerate() {
        if mask.data()[i] == 1.0 {
            px.fill(1.0);
        }
    }
    Ok(out)
}

/// Procedural stand-in for an aligned face photo: smooth background, skin
/// ellipse, hair, eyes, brows and mouth placed near the landmark template.
pub fn synthetic_face(height: usize, width: usize, seed: u64) -> Image {
    let mut r = SplitMix64::new(seed);
    let bg = [r.uniform(0.2, 0.9), r.uniform(0.2, 0.9), r.uniform(0.2, 0.9)];
    let bg2 = [r.uniform(0.2, 0.9), r.uniform(0.2, 0.9), r.uniform(0.2, 0.9)];
    let tone = r.uniform(0.35, 0.9);
    let skin = [tone, tone * r.uniform(0.72, 0.85), tone * r.uniform(0.55, 0.7)];
    let hair_v = r.uniform(0.05, 0.5);
    let hair = [hair_v, hair_v * r.uniform(0.6, 0.9), hair_v * r.uniform(0.4, 0.8)];
    let iris = [r.uniform(0.1, 0.4), r.uniform(0.1, 0.4), r.uniform(0.1, 0.5)];
    let lip = [r.uniform(0.55, 0.8), r.uniform(0.2, 0.35), r.uniform(0.25, 0.4)];
    let (fw, fh) = (r.uniform(0.34, 0.4), r.uniform(0.44, 0.5));
    let hairline = r.uniform(0.18, 0.26);
    let smile = r.uniform(-0.02, 0.03);
    // Soft inside test with a one-pixel ramp.
    let px = 1.0 / height.min(width) as f64;
    let soft = |d: f64| (0.5 - d / (2.0 * px)).clamp(0.0, 1.0);
    let ellipse = |x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64| {
        let d = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt() - 1.0;
        soft(d * rx.min(ry))
    };
    Image::from_fn(height, width, 3, |i, j, c| {
        let (x, y) = ((j as f64 + 0.5) / width as f64, (i as f64 + 0.5) / height as f64);
        let mut v = bg[c] * (1.0 - y) + bg2[c] * y;
        let head = ellipse(x, y, 0.5, 0.5, fw + 0.05, fh + 0.04);
        v += (hair[c] - v) * head;
        let face = ellipse(x, y, 0.5, 0.55, fw, fh) * soft(hairline - y);
        let shade = 1.0 - 0.25 * ((x - 0.5).abs() / fw).powi(2);
        v += (skin[c] * shade - v) * face;
        for ex in [0.34, 0.66] {
            let white = ellipse(x, y, ex, 0.41, 0.065, 0.03);
            v += (0.92 - v) * white;
            v += (iris[c] - v) * ellipse(x, y, ex, 0.41, 0.025, 0.025);
            v += (hair[c] - v) * ellipse(x, y, ex, 0.33, 0.09, 0.015);
        }
        let nose = ellipse(x, y, 0.5, 0.56, 0.035, 0.05);
        v -= 0.08 * nose * v;
        let mouth = ellipse(x, y - smile * ((x - 0.5) / 0.13).powi(2), 0.5, 0.74, 0.12, 0.028);
        v += (lip[c] - v) * mouth;
        v.clamp(0.0, 1.0)
    })
}

/// Mask and fill indices for sample `index`, drawn from unrelated streams.
pub fn select_pair(seed: u64, index: u64, masks: usize, fills: usize) -> (usize, usize) {
    let m = SplitMix64::for_index(seed ^ 0x6D61_736B, index).below(masks.max(1) as u64);
    let f = SplitMix64::for_index(seed ^ 0x6669_6C6C, index).below(fills.max(1) as u64);
    (m as usize, f as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut r = SplitMix64::new(seed);
        Image::from_fn(h, w, 3, |_, _, _| r.next_f64())
    }

    #[test]
    fn block_area_is_a_quarter() {
        for seed in 0..20 {
            let m = gen_block_mask((256, 256), seed);
            assert_eq!(m.area_fraction(), 0.25);
            assert_eq!(classify_area(&m).unwrap(), 2);
        }
        assert_eq!(gen_block_mask((64, 64), 3), gen_block_mask((64, 64), 3));
    }

    #[test]
    fn block_is_a_rectangle() {
        let m = gen_block_mask((32, 48), 9);
        let rows: Vec<usize> = (0..32).filter(|&y| (0..48).any(|x| m.get(y, x))).collect();
        let cols: Vec<usize> = (0..48).filter(|&x| (0..32).any(|y| m.get(y, x))).collect();
        assert_eq!(rows.len(), 16);
        assert_eq!(cols.len(), 24);
        assert_eq!(rows.last().unwrap() - rows[0], 15);
        assert_eq!(cols.last().unwrap() - cols[0], 23);
    }

    #[test]
    fn freeform_is_deterministic_and_bounded() {
        let a = gen_freeform_mask((64, 64), 4, 3).unwrap();
        assert_eq!(a, gen_freeform_mask((64, 64), 4, 3).unwrap());
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(a.area_fraction() > 0.0 && a.area_fraction() <= MAX_AREA);
        assert!(gen_freeform_mask((64, 64), 4, 0).is_err());
    }

    #[test]
    fn interval_edges() {
        assert_eq!(classify_area(&BinaryMask::zeros(10, 10)).unwrap(), 0);
        let frac = |n: usize| BinaryMask::from_fn(10, 10, |y, x| y * 10 + x < n);
        assert_eq!(classify_area(&frac(10)).unwrap(), 1);
        assert_eq!(classify_area(&frac(55)).unwrap(), 5);
        assert_eq!(classify_area(&frac(60)).unwrap(), 5);
        assert!(matches!(classify_area(&frac(61)), Err(Error::OutOfProtocol(_))));
    }

    #[test]
    fn restricted_interval_is_honoured() {
        let spec = MaskSpec {
            kind: MaskKind::Freeform {
                strokes: 2,
                brush: BrushParams::default(),
            },
            area_interval: Some(1),
            seed: 11,
        };
        assert_eq!(classify_area(&spec.generate((64, 64)).unwrap()).unwrap(), 1);
    }

    #[test]
    fn synthetic_faces_differ_by_seed() {
        let a = synthetic_face(32, 32, 1);
        assert_eq!(a, synthetic_face(32, 32, 1));
        assert_ne!(a, synthetic_face(32, 32, 2));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blend_extremes() {
        let gt = noise(8, 8, 1);
        assert_eq!(blend(&gt, &BinaryMask::zeros(8, 8), &FillSource::Constant(0.3)).unwrap(), gt);
        let full = blend(&gt, &BinaryMask::filled(8, 8, true), &FillSource::Constant(0.3)).unwrap();
        assert!(full.data().iter().all(|&v| v == 0.3));
        let white = binary_masked(&gt, &BinaryMask::filled(8, 8, true)).unwrap();
        assert!(white.data().iter().all(|&v| v == 1.0));
        assert_eq!(binary_masked(&gt, &BinaryMask::zeros(8, 8)).unwrap(), gt);
    }

    #[test]
    fn image_fill_is_resized() {
        let gt = noise(8, 8, 1);
        let fill = FillSource::Image(noise(16, 16, 2));
        let out = blend(&gt, &BinaryMask::filled(8, 8, true), &fill).unwrap();
        assert_eq!(out, noise(16, 16, 2).resize_bilinear(8, 8));
        assert!(FillSource::constant(1.5).is_err());
    }

    #[test]
    fn frame_mismatch_is_rejected() {
        assert!(blend(&noise(8, 8, 1), &BinaryMask::zeros(8, 9), &FillSource::Constant(0.0)).is_err());
    }
}
