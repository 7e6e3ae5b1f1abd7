//! Frequency anomaly detection: orthonormal 2-D DCT-II, an anti-diagonal
//! high-pass band, and the inverse transform back to pixel space.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// DCT-II coefficients of an `h x w` plane, orthonormal scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencySpectrum {
    pub height: usize,
    pub width: usize,
    /// Row-major, `coeffs[u * width + v]` with `u` the vertical frequency.
    pub coeffs: Vec<f64>,
}

impl FrequencySpectrum {
    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.coeffs[u * self.width + v]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HighPassConfig {
    alpha: f64,
}

impl HighPassConfig {
    pub const DEFAULT_ALPHA: f64 = 0.08;

    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("high-pass alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for HighPassConfig {
    fn default() -> Self {
        Self {
            alpha: Self::DEFAULT_ALPHA,
        }
    }
}

/// Orthonormal DCT-II basis, `basis[k * n + i] = s_k cos(pi (2i + 1) k / 2n)`.
fn basis(n: usize) -> Vec<f64> {
    let mut b = vec![0.0; n * n];
    let s0 = (1.0 / n as f64).sqrt();
    let s = (2.0 / n as f64).sqrt();
    for k in 0..n {
        let scale = if k == 0 { s0 } else { s };
        for i in 0..n {
            b[k * n + i] = scale * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    b
}

/// `out = B_h · x · B_wᵀ` (forward) or `B_hᵀ · x · B_w` (inverse).
fn separable(x: &[f64], h: usize, w: usize, inverse: bool) -> Vec<f64> {
    let bh = basis(h);
    let bw = basis(w);
    let mut tmp = vec![0.0; h * w];
    // Rows: tmp = x · B_wᵀ (forward) or x · B_w (inverse).
    crate::tensor::gemm(h, w, w, 1.0, x, false, &bw, !inverse, 0.0, &mut tmp);
    let mut out = vec![0.0; h * w];
    // Columns: out = B_h · tmp (forward) or B_hᵀ · tmp (inverse).
    crate::tensor::gemm(h, h, w, 1.0, &bh, inverse, &tmp, false, 0.0, &mut out);
    out
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        [h, w, 1] => Ok((*h, *w)),
        s => Err(Error::dim("dct2", crate::error::Axis::Rank, format!("expected an HxW plane, got {s:?}"))),
    }
}

pub fn dct2(channel: &Tensor) -> Result<FrequencySpectrum> {
    let (h, w) = plane_dims(channel)?;
    Ok(FrequencySpectrum {
        height: h,
        width: w,
        coeffs: separable(channel.data(), h, w, false),
    })
}

pub fn idct2(spectrum: &FrequencySpectrum) -> Tensor {
    let (h, w) = (spectrum.height, spectrum.width);
    Tensor::from_parts(vec![h, w], separable(&spectrum.coeffs, h, w, true))
}

/// Zeroes every coefficient with `u + v < alpha * (h + w)`.
pub fn high_pass(spectrum: &FrequencySpectrum, cfg: HighPassConfig) -> FrequencySpectrum {
    let cut = cfg.alpha * (spectrum.height + spectrum.width) as f64;
    let mut out = spectrum.clone();
    for u in 0..spectrum.height {
        for v in 0..spectrum.width {
            if ((u + v) as f64) < cut {
                out.coeffs[u * spectrum.width + v] = 0.0;
            }
        }
    }
    out
}

/// `F = idct2(high_pass(dct2(luma(image))))`, shape `[h, w, 1]`.
pub fn frequency_representation(image: &Image, cfg: HighPassConfig) -> Tensor {
    let luma = image.luma();
    let spec = dct2(&luma).expect("luma is a plane");
    let f = idct2(&high_pass(&spec, cfg));
    Tensor::from_parts(vec![image.height(), image.width(), 1], f.into_data())
}

/// Direct O(h²w²) double sum, kept as an independent reference.
pub fn dct2_reference(x: &Tensor) -> Result<FrequencySpectrum> {
    let (h, w) = plane_dims(x)?;
    let cu = |k: usize, n: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    let mut coeffs = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = 0.0;
            for i in 0..h {
                let cy = (PI * (2 * i + 1) as f64 * u as f64 / (2 * h) as f64).cos();
                for j in 0..w {
                    let cx = (PI * (2 * j + 1) as f64 * v as f64 / (2 * w) as f64).cos();
                    acc += x.data()[i * w + j] * cy * cx;
                }
            }
            coeffs[u * w + v] = cu(u, h) * cu(v, w) * acc;
        }
    }
    Ok(FrequencySpectrum { height: h, width: w, coeffs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_plane(h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = SplitMix64::new(seed);
        Tensor::from_fn(&[h, w], |_| r.next_f64())
    }

    #[test]
    fn constant_plane_has_only_dc() {
        let (h, w, c) = (6, 10, 0.7);
        let s = dct2(&Tensor::full(&[h, w], c)).unwrap();
        assert!((s.at(0, 0) - c * ((h * w) as f64).sqrt()).abs() < 1e-10);
        for (i, v) in s.coeffs.iter().enumerate().skip(1) {
            assert!(v.abs() < 1e-10, "coeff {i} = {v}");
        }
    }

    #[test]
    fn dc_only_spectrum_inverts_to_ones() {
        let (h, w) = (5, 7);
        let mut coeffs = vec![0.0; h * w];
        coeffs[0] = ((h * w) as f64).sqrt();
        let x = idct2(&FrequencySpectrum { height: h, width: w, coeffs });
        assert!(x.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let zero = idct2(&FrequencySpectrum { height: h, width: w, coeffs: vec![0.0; h * w] });
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn separable_matches_reference() {
        for (n, seed) in [(8, 1), (16, 2)] {
            let x = random_plane(n, n, seed);
            let fast = dct2(&x).unwrap();
            let slow = dct2_reference(&x).unwrap();
            let err = fast.coeffs.iter().zip(&slow.coeffs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "{n}: {err}");
        }
        let x = random_plane(5, 9, 3);
        let fast = dct2(&x).unwrap();
        let slow = dct2_reference(&x).unwrap();
        for (a, b) in fast.coeffs.iter().zip(&slow.coeffs) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let x = random_plane(32, 32, 9);
        let s = dct2(&x).unwrap();
        let e_x: f64 = x.data().iter().map(|v| v * v).sum();
        assert!((s.energy() - e_x).abs() / e_x < 1e-8);
        assert!(idct2(&s).max_abs_diff(&x) < 1e-9);
        let s2 = dct2(&idct2(&s)).unwrap();
        let err = s2.coeffs.iter().zip(&s.coeffs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);
    }

    #[test]
    fn high_pass_removes_dc_of_constant() {
        // alpha * (h + w) = 1 removes exactly the (0, 0) coefficient.
        let (h, w) = (10, 10);
        let cfg = HighPassConfig::new(1.0 / (h + w) as f64).unwrap();
        let s = high_pass(&dct2(&Tensor::full(&[h, w], 0.4)).unwrap(), cfg);
        assert!(s.coeffs.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn full_cut_zeroes_everything() {
        let (h, w) = (6, 8);
        // max(u + v) = 12 < 0.99 * 14.
        let cfg = HighPassConfig::new(0.99).unwrap();
        let s = high_pass(&dct2(&random_plane(h, w, 4)).unwrap(), cfg);
        assert!(s.coeffs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkerboard_keeps_nyquist_corner() {
        let (h, w) = (8, 8);
        let x = Tensor::from_fn(&[h, w], |i| if (i / w + i % w) % 2 == 0 { 1.0 } else { -1.0 });
        let reference = dct2_reference(&x).unwrap();
        let corner = reference.at(h - 1, w - 1);
        assert!(corner.abs() > 1.0);
        for alpha in [0.05, 0.3, 0.6, 0.85] {
            let s = high_pass(&dct2(&x).unwrap(), HighPassConfig::new(alpha).unwrap());
            assert!((s.at(h - 1, w - 1) - corner).abs() < 1e-10);
        }
    }

    #[test]
    fn alpha_validated() {
        assert!(HighPassConfig::new(0.0).is_err());
        assert!(HighPassConfig::new(1.0).is_err());
        assert!(HighPassConfig::new(f64::NAN).is_err());
    }
}
