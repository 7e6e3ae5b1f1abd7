//! Landmark heatmaps used as a structural prior.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_LANDMARKS: usize = 68;
/// Gaussian width in pixels.
pub const HEATMAP_SIGMA: f64 = 2.0;

/// `[K, h, w]` unit-peak Gaussian heatmaps.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkMap {
    pub heatmap: Tensor,
}

impl LandmarkMap {
    /// Renders points given as `(x, y)` pixel coordinates. Each point is
    /// snapped to its nearest pixel (clamped into the frame), which carries
    /// the value 1.
    pub fn render(points: &[(f64, f64)], height: usize, width: usize, sigma: f64) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; points.len() * plane];
        let denom = 2.0 * sigma * sigma;
        let reach = (4.0 * sigma).ceil() as isize;
        for (k, &(px, py)) in points.iter().enumerate() {
            let cx = (px.round() as isize).clamp(0, width as isize - 1);
            let cy = (py.round() as isize).clamp(0, height as isize - 1);
            let ch = &mut data[k * plane..(k + 1) * plane];
            for y in (cy - reach).max(0)..=(cy + reach).min(height as isize - 1) {
                for x in (cx - reach).max(0)..=(cx + reach).min(width as isize - 1) {
                    let d2 = ((x - cx) * (x - cx) + (y - cy) * (y - cy)) as f64;
                    ch[y as usize * width + x as usize] = (-d2 / denom).exp();
                }
            }
        }
        Self {
            heatmap: Tensor::from_parts(vec![points.len(), height, width], data),
        }
    }

    /// Mean-face layout scaled to the frame.
    pub fn template(height: usize, width: usize) -> Self {
        let pts: Vec<(f64, f64)> = template_points()
            .into_iter()
            .map(|(x, y)| (x * (width - 1) as f64, y * (height - 1) as f64))
            .collect();
        Self::render(&pts, height, width, HEATMAP_SIGMA)
    }

    pub fn channels(&self) -> usize {
        self.heatmap.shape()[0]
    }

    /// `[1, K, h, w]`.
    pub fn to_nchw(&self) -> Tensor {
        let s = self.heatmap.shape();
        self.heatmap.reshape(&[1, s[0], s[1], s[2]]).expect("same length")
    }
}

/// 68 points in normalized `(x, y)`: jaw, brows, nose, eyes, mouth.
pub fn template_points() -> Vec<(f64, f64)> {
    let mut p = Vec::with_capacity(NUM_LANDMARKS);
    for i in 0..17 {
        let t = std::f64::consts::PI * i as f64 / 16.0;
        p.push((0.5 - 0.38 * t.cos(), 0.42 + 0.42 * t.sin()));
    }
    for side in [0.0, 0.32] {
        for i in 0..5 {
            let t = i as f64 / 4.0;
            p.push((0.2 + side + 0.28 * t, 0.33 - 0.04 * (std::f64::consts::PI * t).sin()));
        }
    }
    for i in 0..4 {
        p.push((0.5, 0.4 + 0.05 * i as f64));
    }
    for i in 0..5 {
        p.push((0.42 + 0.04 * i as f64, 0.6 + 0.015 * (1.0 - ((i as f64 - 2.0) / 2.0).abs())));
    }
    for cx in [0.34, 0.66] {
        for i in 0..6 {
            let t = std::f64::consts::PI * i as f64 / 3.0;
            p.push((cx - 0.07 * t.cos(), 0.41 - 0.025 * t.sin()));
        }
    }
    for i in 0..12 {
        let t = std::f64::consts::PI * i as f64 / 6.0;
        p.push((0.5 - 0.13 * t.cos(), 0.74 - 0.05 * t.sin()));
    }
    for i in 0..8 {
        let t = std::f64::consts::PI * i as f64 / 4.0;
        p.push((0.5 - 0.08 * t.cos(), 0.74 - 0.015 * t.sin()));
    }
    p
}

/// Parses one `x y` pair per line; blank lines and `#` comments are skipped.
pub fn parse_landmarks(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.split('#').next().unwrap_or("").trim();
        if !body.is_empty() {
            let nums: Vec<&str> = body.split_whitespace().collect();
            let parse = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
            match nums.as_slice() {
                [x, y] => match (parse(x), parse(y)) {
                    (Some(x), Some(y)) => out.push((x, y)),
                    _ => {
                        return Err(Error::Parse {
                            offset,
                            msg: format!("invalid landmark coordinates '{body}'"),
                        })
                    }
                },
                _ => {
                    return Err(Error::Parse {
                        offset,
                        msg: format!("expected 'x y', got '{body}'"),
                    })
                }
            }
        }
        offset += line.len();
    }
    if out.len() != NUM_LANDMARKS {
        return Err(Error::Parse {
            offset,
            msg: format!("expected {NUM_LANDMARKS} landmarks, found {}", out.len()),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_has_68_points_inside_unit_square() {
        let p = template_points();
        assert_eq!(p.len(), NUM_LANDMARKS);
        assert!(p.iter().all(|&(x, y)| (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)));
    }

    #[test]
    fn peaks_are_one_at_the_landmark() {
        let m = LandmarkMap::render(&[(3.2, 5.7), (-4.0, 100.0)], 16, 12, 2.0);
        let h = &m.heatmap;
        assert_eq!(h.at(&[0, 6, 3]), 1.0);
        assert_eq!(h.at(&[1, 15, 0]), 1.0);
        for k in 0..2 {
            let ch = &h.data()[k * 192..(k + 1) * 192];
            assert_eq!(ch.iter().cloned().fold(f64::MIN, f64::max), 1.0);
        }
        assert!((h.at(&[0, 6, 5]) - (-4.0f64 / 8.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn parse_reports_offsets() {
        let good: String = (0..68).map(|i| format!("{i} {}\n", i * 2)).collect();
        assert_eq!(parse_landmarks(&good).unwrap()[3], (3.0, 6.0));
        let bad = "1 2\n3 x\n";
        match parse_landmarks(bad) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        assert!(parse_landmarks("1 2\n").is_err());
    }
}
