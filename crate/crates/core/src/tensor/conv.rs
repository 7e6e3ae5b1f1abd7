//! 2-D convolution (cross-correlation) and its transpose via im2col + GEMM.

use super::gemm::gemm;
use super::Tensor;
use crate::error::{Axis, Error, Result};
use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvCfg {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1, zero padding, no dilation.
    pub const fn unit() -> Self {
        Self::new(1, 0, 1)
    }

    /// Stride 1 with padding that preserves spatial size for odd `kernel`.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(1, dilation * (kernel - 1) / 2, dilation)
    }
}

pub fn conv_out_size(len: usize, kernel: usize, cfg: ConvCfg) -> Option<usize> {
    let span = cfg.dilation * (kernel - 1) + 1;
    let padded = len + 2 * cfg.padding;
    if padded < span || cfg.stride == 0 {
        return None;
    }
    Some((padded - span) / cfg.stride + 1)
}

pub fn deconv_out_size(len: usize, kernel: usize, cfg: ConvCfg) -> Option<usize> {
    let full = (len - 1) * cfg.stride + cfg.dilation * (kernel - 1) + 1;
    full.checked_sub(2 * cfg.padding).filter(|&n| n > 0)
}

/// Sliding-window geometry: an input plane `c x h x w` read by a `kh x kw`
/// kernel into an `oh x ow` output grid.
#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cfg: ConvCfg,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.cfg.stride == 1 && self.cfg.padding == 0
    }

    fn src(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (o * self.cfg.stride + k * self.cfg.dilation) as isize - self.cfg.padding as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

fn im2col(x: &[f64], g: &Geom, cols: &mut [f64]) {
    let ncol = g.cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.src(oy, ki, g.h) {
                        None => line.fill(0.0),
                        Some(iy) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = g.src(ox, kj, g.w).map_or(0.0, |ix| plane[iy * g.w + ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geom, x: &mut [f64]) {
    let ncol = g.cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ki, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.src(ox, kj, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_rank(op: &'static str, t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(
            op,
            Axis::Rank,
            format!("{what} must be rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != channels {
            return Err(Error::dim(
                op,
                Axis::Named("bias"),
                format!("bias has {} entries for {channels} output channels", b.len()),
            ));
        }
    }
    Ok(())
}

struct ConvPlan {
    n: usize,
    o: usize,
    g: Geom,
}

fn conv_plan(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, cfg: ConvCfg) -> Result<ConvPlan> {
    const OP: &str = "conv2d";
    check_rank(OP, x, 4, "input")?;
    check_rank(OP, w, 4, "weight")?;
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if c != wc {
        return Err(Error::dim(OP, Axis::Index(1), format!("input has {c} channels, weight expects {wc}")));
    }
    if cfg.dilation == 0 || cfg.stride == 0 {
        return Err(Error::contract("conv2d needs stride >= 1 and dilation >= 1"));
    }
    check_bias(OP, bias, o)?;
    let oh = conv_out_size(h, kh, cfg)
        .ok_or_else(|| Error::dim(OP, Axis::Index(2), format!("height {h} too small for kernel {kh} with {cfg:?}")))?;
    let ow = conv_out_size(wd, kw, cfg)
        .ok_or_else(|| Error::dim(OP, Axis::Index(3), format!("width {wd} too small for kernel {kw} with {cfg:?}")))?;
    Ok(ConvPlan {
        n,
        o,
        g: Geom { c, h, w: wd, kh, kw, oh, ow, cfg },
    })
}

pub(crate) fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, cfg: ConvCfg) -> Result<Tensor> {
    let ConvPlan { n, o, g } = conv_plan(x, w, bias, cfg)?;
    let in_len = g.c * g.h * g.w;
    let out_len = o * g.cols();
    let mut out = vec![0.0; n * out_len];
    exec::for_each_chunk_mut(&mut out, out_len, |i, dst| {
        let xi = &x.data()[i * in_len..(i + 1) * in_len];
        if g.is_pointwise() {
            gemm(o, g.c, g.cols(), 1.0, w.data(), false, xi, false, 0.0, dst);
        } else {
            let mut cols = vec![0.0; g.rows() * g.cols()];
            im2col(xi, &g, &mut cols);
            gemm(o, g.rows(), g.cols(), 1.0, w.data(), false, &cols, false, 0.0, dst);
        }
        if let Some(b) = bias {
            for (oc, row) in dst.chunks_mut(g.cols()).enumerate() {
                let bv = b.data()[oc];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Ok(Tensor::from_parts(vec![n, o, g.oh, g.ow], out))
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    cfg: ConvCfg,
    grad: &[f64],
    want: [bool; 3],
) -> ConvGrads {
    let ConvPlan { n, o, g } = conv_plan(x, w, None, cfg).expect("validated in forward");
    let in_len = g.c * g.h * g.w;
    let out_len = o * g.cols();
    let [want_x, want_w, want_b] = want;
    let parts = exec::map_indices(n, |i| {
        let xi = &x.data()[i * in_len..(i + 1) * in_len];
        let gi = &grad[i * out_len..(i + 1) * out_len];
        let gw = want_w.then(|| {
            let mut gw = vec![0.0; o * g.rows()];
            if g.is_pointwise() {
                gemm(o, g.cols(), g.rows(), 1.0, gi, false, xi, true, 0.0, &mut gw);
            } else {
                let mut cols = vec![0.0; g.rows() * g.cols()];
                im2col(xi, &g, &mut cols);
                gemm(o, g.cols(), g.rows(), 1.0, gi, false, &cols, true, 0.0, &mut gw);
            }
            gw
        });
        let gx = want_x.then(|| {
            let mut gx = vec![0.0; in_len];
            if g.is_pointwise() {
                gemm(g.c, o, g.cols(), 1.0, w.data(), true, gi, false, 0.0, &mut gx);
            } else {
                let mut dcols = vec![0.0; g.rows() * g.cols()];
                gemm(g.rows(), o, g.cols(), 1.0, w.data(), true, gi, false, 0.0, &mut dcols);
                col2im(&dcols, &g, &mut gx);
            }
            gx
        });
        (gx, gw)
    });
    let mut input = want_x.then(|| Vec::with_capacity(n * in_len));
    let mut weight = want_w.then(|| vec![0.0; o * g.rows()]);
    for (gx, gw) in parts {
        if let (Some(acc), Some(gx)) = (input.as_mut(), gx) {
            acc.extend_from_slice(&gx);
        }
        if let (Some(acc), Some(gw)) = (weight.as_mut(), gw) {
            acc.iter_mut().zip(&gw).for_each(|(a, b)| *a += b);
        }
    }
    let bias = (want_b && has_bias).then(|| channel_sums(grad, n, o, g.cols()));
    ConvGrads { input, weight, bias }
}

fn channel_sums(grad: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for i in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            let off = (i * c + ch) * plane;
            *acc += grad[off..off + plane].iter().sum::<f64>();
        }
    }
    out
}

struct DeconvPlan {
    n: usize,
    ci: usize,
    /// Geometry of the equivalent forward convolution from output to input.
    g: Geom,
}

fn deconv_plan(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, cfg: ConvCfg) -> Result<DeconvPlan> {
    const OP: &str = "deconv2d";
    check_rank(OP, x, 4, "input")?;
    check_rank(OP, w, 4, "weight")?;
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (wci, co, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if ci != wci {
        return Err(Error::dim(OP, Axis::Index(1), format!("input has {ci} channels, weight expects {wci}")));
    }
    if cfg.stride == 0 || cfg.dilation == 0 {
        return Err(Error::contract("deconv2d needs stride >= 1 and dilation >= 1"));
    }
    check_bias(OP, bias, co)?;
    let oh = deconv_out_size(h, kh, cfg)
        .ok_or_else(|| Error::dim(OP, Axis::Index(2), format!("padding {} too large for height {h}", cfg.padding)))?;
    let ow = deconv_out_size(wd, kw, cfg)
        .ok_or_else(|| Error::dim(OP, Axis::Index(3), format!("padding {} too large for width {wd}", cfg.padding)))?;
    Ok(DeconvPlan {
        n,
        ci,
        g: Geom { c: co, h: oh, w: ow, kh, kw, oh: h, ow: wd, cfg },
    })
}

/// Transposed convolution; `w` is laid out `[in, out, kh, kw]`.
pub(crate) fn deconv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, cfg: ConvCfg) -> Result<Tensor> {
    let DeconvPlan { n, ci, g } = deconv_plan(x, w, bias, cfg)?;
    let in_len = ci * g.cols();
    let out_len = g.c * g.h * g.w;
    let mut out = vec![0.0; n * out_len];
    exec::for_each_chunk_mut(&mut out, out_len, |i, dst| {
        let xi = &x.data()[i * in_len..(i + 1) * in_len];
        let mut cols = vec![0.0; g.rows() * g.cols()];
        gemm(g.rows(), ci, g.cols(), 1.0, w.data(), true, xi, false, 0.0, &mut cols);
        col2im(&cols, &g, dst);
        if let Some(b) = bias {
            for (oc, plane) in dst.chunks_mut(g.h * g.w).enumerate() {
                let bv = b.data()[oc];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Ok(Tensor::from_parts(vec![n, g.c, g.h, g.w], out))
}

pub(crate) fn deconv2d_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    cfg: ConvCfg,
    grad: &[f64],
    want: [bool; 3],
) -> ConvGrads {
    let DeconvPlan { n, ci, g } = deconv_plan(x, w, None, cfg).expect("validated in forward");
    let in_len = ci * g.cols();
    let out_len = g.c * g.h * g.w;
    let [want_x, want_w, want_b] = want;
    let parts = exec::map_indices(n, |i| {
        let xi = &x.data()[i * in_len..(i + 1) * in_len];
        let mut gcols = vec![0.0; g.rows() * g.cols()];
        im2col(&grad[i * out_len..(i + 1) * out_len], &g, &mut gcols);
        let gx = want_x.then(|| {
            let mut gx = vec![0.0; in_len];
            gemm(ci, g.rows(), g.cols(), 1.0, w.data(), false, &gcols, false, 0.0, &mut gx);
            gx
        });
        let gw = want_w.then(|| {
            let mut gw = vec![0.0; ci * g.rows()];
            gemm(ci, g.cols(), g.rows(), 1.0, xi, false, &gcols, true, 0.0, &mut gw);
            gw
        });
        (gx, gw)
    });
    let mut input = want_x.then(|| Vec::with_capacity(n * in_len));
    let mut weight = want_w.then(|| vec![0.0; ci * g.rows()]);
    for (gx, gw) in parts {
        if let (Some(acc), Some(gx)) = (input.as_mut(), gx) {
            acc.extend_from_slice(&gx);
        }
        if let (Some(acc), Some(gw)) = (weight.as_mut(), gw) {
            acc.iter_mut().zip(&gw).for_each(|(a, b)| *a += b);
        }
    }
    let bias = (want_b && has_bias).then(|| channel_sums(grad, n, g.c, g.h * g.w));
    ConvGrads { input, weight, bias }
}
