//! Bilinear resampling (half-pixel centres, edge clamp) and average pooling.

use super::Tensor;
use crate::error::{Axis, Error, Result};

/// Per-output-index source taps along one axis.
#[derive(Debug, Clone)]
pub struct AxisWeights {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub fn bilinear_weights(src: usize, dst: usize) -> AxisWeights {
    let scale = src as f64 / dst as f64;
    let mut w = AxisWeights {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        w.lo.push(lo);
        w.hi.push(hi);
        w.frac.push(if hi == lo { 0.0 } else { pos - lo as f64 });
    }
    w
}

fn plane_dims(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::dim(op, Axis::Rank, format!("need at least 2 axes, got {:?}", x.shape())));
    }
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    Ok((x.len() / (h * w), h, w))
}

/// Resizes the last two axes to `oh x ow`.
pub(crate) fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (planes, h, w) = plane_dims("bilinear_upsample", x)?;
    let wy = bilinear_weights(h, oh);
    let wx = bilinear_weights(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, fy) = (wy.lo[y], wy.hi[y], wy.frac[y]);
            for xo in 0..ow {
                let (x0, x1, fx) = (wx.lo[xo], wx.hi[xo], wx.frac[xo]);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn resize_bilinear_backward(in_shape: &[usize], oh: usize, ow: usize, g: &[f64]) -> Vec<f64> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let planes = in_shape.iter().product::<usize>() / (h * w);
    let wy = bilinear_weights(h, oh);
    let wx = bilinear_weights(w, ow);
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let (y0, y1, fy) = (wy.lo[y], wy.hi[y], wy.frac[y]);
            for xo in 0..ow {
                let (x0, x1, fx) = (wx.lo[xo], wx.hi[xo], wx.frac[xo]);
                let gv = gp[y * ow + xo];
                dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    gx
}

/// Non-overlapping `k x k` mean pooling over the last two axes.
pub(crate) fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let (planes, h, w) = plane_dims("avg_pool", x)?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::dim("avg_pool", Axis::Named("spatial"), format!("{h}x{w} not divisible by {k}")));
    }
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for y in 0..h {
            for xi in 0..w {
                out[(p * oh + y / k) * ow + xi / k] += x.data()[(p * h + y) * w + xi] * inv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn avg_pool_backward(in_shape: &[usize], k: usize, g: &[f64]) -> Vec<f64> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let planes = in_shape.iter().product::<usize>() / (h * w);
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for xi in 0..w {
                gx[(p * h + y) * w + xi] = g[(p * oh + y / k) * ow + xi / k] * inv;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_keeps_constants() {
        let x = Tensor::full(&[1, 2, 3, 5], 0.37);
        let y = resize_bilinear(&x, 6, 10).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn upsample_interpolates_half_pixel() {
        let x = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let y = resize_bilinear(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn pool_averages_blocks() {
        let x = Tensor::from_fn(&[1, 1, 2, 4], |i| i as f64);
        let y = avg_pool(&x, 2).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5]);
    }
}
