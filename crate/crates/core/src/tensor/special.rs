//! Fused kernels with hand-derived backward passes: softmax, masked region
//! standardization and the 3x3 cosine patch-similarity map.

use super::{split_axis, Tensor};
use crate::error::{Axis, Error, Result};

pub(crate) fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::dim("softmax", Axis::Index(axis), format!("axis out of range for {:?}", x.shape())));
    }
    let (outer, dim, inner) = split_axis(x.shape(), axis);
    let mut out = vec![0.0; x.len()];
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * dim + k) * inner + i;
            let m = (0..dim).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..dim {
                let e = (xd[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..dim {
                out[at(k)] /= z;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_backward(y: &Tensor, axis: usize, g: &[f64]) -> Vec<f64> {
    let (outer, dim, inner) = split_axis(y.shape(), axis);
    let yd = y.data();
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * dim + k) * inner + i;
            let dot: f64 = (0..dim).map(|k| g[at(k)] * yd[at(k)]).sum();
            for k in 0..dim {
                gx[at(k)] = yd[at(k)] * (g[at(k)] - dot);
            }
        }
    }
    gx
}

/// Saved state of a region standardization, needed for its backward pass.
#[derive(Debug, Clone)]
pub(crate) struct RegionStats {
    /// Region index (0 = valid, 1 = masked) per spatial site and batch item.
    region: Vec<u8>,
    /// `[n][c][region]` denominators, and whether each hit the floor.
    denom: Vec<f64>,
    floored: Vec<bool>,
    count: Vec<usize>,
}

fn mask_regions(x_shape: &[usize], mask: &Tensor) -> Result<Vec<u8>> {
    let (n, h, w) = (x_shape[0], x_shape[2], x_shape[3]);
    let ms = mask.shape();
    let ok = ms.len() == 4 && ms[1] == 1 && ms[2] == h && ms[3] == w && (ms[0] == n || ms[0] == 1);
    if !ok {
        return Err(Error::dim(
            "region_norm",
            Axis::Named("mask"),
            format!("mask {ms:?} does not cover features {x_shape:?}"),
        ));
    }
    let plane = h * w;
    let mut region = Vec::with_capacity(n * plane);
    for b in 0..n {
        let src = if ms[0] == 1 { 0 } else { b };
        for &v in &mask.data()[src * plane..(src + 1) * plane] {
            if v == 0.0 {
                region.push(0);
            } else if v == 1.0 {
                region.push(1);
            } else {
                return Err(Error::contract(format!("region mask must be binary, found {v}")));
            }
        }
    }
    Ok(region)
}

/// Standardizes masked and unmasked sites of each `(n, c)` plane separately.
/// The denominator is `max(std, eps)`, so a constant region maps to zeros.
pub(crate) fn region_norm(x: &Tensor, mask: &Tensor, eps: f64) -> Result<(Tensor, RegionStats)> {
    if x.rank() != 4 {
        return Err(Error::dim("region_norm", Axis::Rank, format!("expected NCHW, got {:?}", x.shape())));
    }
    let region = mask_regions(x.shape(), mask)?;
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let plane = x.shape()[2] * x.shape()[3];
    let mut out = vec![0.0; x.len()];
    let mut denom = vec![1.0; n * c * 2];
    let mut floored = vec![false; n * c * 2];
    let mut count = vec![0usize; n * 2];
    for b in 0..n {
        let reg = &region[b * plane..(b + 1) * plane];
        for &r in reg {
            count[b * 2 + r as usize] += 1;
        }
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let xs = &x.data()[off..off + plane];
            let mut sum = [0.0; 2];
            for (v, &r) in xs.iter().zip(reg) {
                sum[r as usize] += v;
            }
            let cnt = [count[b * 2], count[b * 2 + 1]];
            let mean = [0, 1].map(|r| if cnt[r] > 0 { sum[r] / cnt[r] as f64 } else { 0.0 });
            let mut sq = [0.0; 2];
            for (v, &r) in xs.iter().zip(reg) {
                let d = v - mean[r as usize];
                sq[r as usize] += d * d;
            }
            for r in 0..2 {
                if cnt[r] == 0 {
                    continue;
                }
                let std = (sq[r] / cnt[r] as f64).sqrt();
                let k = (b * c + ch) * 2 + r;
                floored[k] = std <= eps;
                denom[k] = std.max(eps);
            }
            for (i, (v, &r)) in xs.iter().zip(reg).enumerate() {
                out[off + i] = (v - mean[r as usize]) / denom[(b * c + ch) * 2 + r as usize];
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        RegionStats {
            region,
            denom,
            floored,
            count,
        },
    ))
}

pub(crate) fn region_norm_backward(y: &Tensor, stats: &RegionStats, g: &[f64]) -> Vec<f64> {
    let (n, c) = (y.shape()[0], y.shape()[1]);
    let plane = y.shape()[2] * y.shape()[3];
    let mut gx = vec![0.0; y.len()];
    for b in 0..n {
        let reg = &stats.region[b * plane..(b + 1) * plane];
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (ys, gs) = (&y.data()[off..off + plane], &g[off..off + plane]);
            let mut mg = [0.0; 2];
            let mut mgy = [0.0; 2];
            for ((&yv, &gv), &r) in ys.iter().zip(gs).zip(reg) {
                mg[r as usize] += gv;
                mgy[r as usize] += gv * yv;
            }
            for r in 0..2 {
                let cnt = stats.count[b * 2 + r];
                if cnt > 0 {
                    mg[r] /= cnt as f64;
                    mgy[r] /= cnt as f64;
                }
            }
            for (i, ((&yv, &gv), &r)) in ys.iter().zip(gs).zip(reg).enumerate() {
                let k = (b * c + ch) * 2 + r as usize;
                let r = r as usize;
                gx[off + i] = if stats.floored[k] {
                    (gv - mg[r]) / stats.denom[k]
                } else {
                    (gv - mg[r] - yv * mgy[r]) / stats.denom[k]
                };
            }
        }
    }
    gx
}

/// Neighbour offsets of the 3x3 window, centre included.
const WINDOW: [(isize, isize); 9] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

fn neighbours(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    WINDOW.iter().filter_map(move |&(dy, dx)| {
        let (ny, nx) = (y as isize + dy, x as isize + dx);
        (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w).then(|| ny as usize * w + nx as usize)
    })
}

#[derive(Debug, Clone)]
pub(crate) struct SimilarityState {
    /// Unit feature vectors, `[n][site][c]`; zero where the feature norm is zero.
    unit: Vec<f64>,
    norm: Vec<f64>,
}

/// Mean cosine similarity of each site with its clamped 3x3 neighbourhood.
pub(crate) fn patch_similarity(t: &Tensor) -> Result<(Tensor, SimilarityState)> {
    if t.rank() != 4 {
        return Err(Error::dim("patch_similarity", Axis::Rank, format!("expected NCHW, got {:?}", t.shape())));
    }
    let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    if h < 3 || w < 3 {
        return Err(Error::dim("patch_similarity", Axis::Named("spatial"), format!("need at least 3x3, got {h}x{w}")));
    }
    let plane = h * w;
    let mut unit = vec![0.0; n * plane * c];
    let mut norm = vec![0.0; n * plane];
    for b in 0..n {
        for s in 0..plane {
            let nrm = (0..c).map(|ch| t.data()[(b * c + ch) * plane + s].powi(2)).sum::<f64>().sqrt();
            norm[b * plane + s] = nrm;
            if nrm > 0.0 {
                for ch in 0..c {
                    unit[(b * plane + s) * c + ch] = t.data()[(b * c + ch) * plane + s] / nrm;
                }
            }
        }
    }
    let mut e = vec![0.0; n * plane];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let ui = &unit[(b * plane + i) * c..(b * plane + i + 1) * c];
                let mut acc = 0.0;
                let mut cnt = 0;
                for j in neighbours(y, x, h, w) {
                    let uj = &unit[(b * plane + j) * c..(b * plane + j + 1) * c];
                    acc += ui.iter().zip(uj).map(|(a, b)| a * b).sum::<f64>();
                    cnt += 1;
                }
                e[b * plane + i] = acc / cnt as f64;
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, 1, h, w], e), SimilarityState { unit, norm }))
}

pub(crate) fn patch_similarity_backward(shape: &[usize], st: &SimilarityState, g: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut gu = vec![0.0; n * plane * c];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let ns: Vec<usize> = neighbours(y, x, h, w).collect();
                let coef = g[b * plane + i] / ns.len() as f64;
                for j in ns {
                    for ch in 0..c {
                        let (ii, jj) = ((b * plane + i) * c + ch, (b * plane + j) * c + ch);
                        gu[ii] += coef * st.unit[jj];
                        gu[jj] += coef * st.unit[ii];
                    }
                }
            }
        }
    }
    let mut gt = vec![0.0; n * c * plane];
    for b in 0..n {
        for s in 0..plane {
            let nrm = st.norm[b * plane + s];
            if nrm == 0.0 {
                continue;
            }
            let base = (b * plane + s) * c;
            let u = &st.unit[base..base + c];
            let gus = &gu[base..base + c];
            let proj: f64 = u.iter().zip(gus).map(|(a, b)| a * b).sum();
            for ch in 0..c {
                gt[(b * c + ch) * plane + s] = (gus[ch] - u[ch] * proj) / nrm;
            }
        }
    }
    gt
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = softmax(&Tensor::zeros(&[1, 3]), 1).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_on_middle_axis() {
        let x = Tensor::from_fn(&[2, 3, 2], |i| i as f64 * 0.5);
        let y = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|k| y.at(&[o, k, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn region_values_one_three_standardize_to_unit() {
        let x = Tensor::new(&[1, 1, 1, 4], vec![1.0, 3.0, 5.0, 5.0]).unwrap();
        let m = Tensor::new(&[1, 1, 1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let (y, _) = region_norm(&x, &m, 1e-5).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn non_binary_region_mask_rejected() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let m = Tensor::full(&[1, 1, 2, 2], 0.5);
        assert!(matches!(region_norm(&x, &m, 1e-5), Err(Error::Contract(_))));
    }

    #[test]
    fn identical_features_give_unit_similarity() {
        let t = Tensor::from_fn(&[1, 4, 5, 6], |i| [0.3, -1.0, 2.0, 0.5][i / 30]);
        let (e, _) = patch_similarity(&t).unwrap();
        assert!(e.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }
}
