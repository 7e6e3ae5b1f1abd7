//! Image and mask containers shared by every stage.

use crate::error::{Axis, Error, Result};
use crate::tensor::{bilinear_weights, Tensor};

/// `h x w x c` pixels in `[0, 1]`, interleaved row-major, `c` is 1 or 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::dim("image", Axis::Named("channels"), format!("expected 1 or 3, got {channels}")));
        }
        if height == 0 || width == 0 || data.len() != height * width * channels {
            return Err(Error::dim(
                "image",
                Axis::Rank,
                format!("{height}x{width}x{channels} needs {} values, got {}", height * width * channels, data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels]).expect("valid dims")
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data).expect("valid dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Luma plane `[h, w]` (0.299 R + 0.587 G + 0.114 B; identity for gray).
    pub fn luma(&self) -> Tensor {
        let n = self.height * self.width;
        let data = if self.channels == 1 {
            self.data.clone()
        } else {
            (0..n)
                .map(|i| 0.299 * self.data[3 * i] + 0.587 * self.data[3 * i + 1] + 0.114 * self.data[3 * i + 2])
                .collect()
        };
        Tensor::from_parts(vec![self.height, self.width], data)
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image::from_fn(self.height, self.width, 3, |y, x, _| self.get(y, x, 0))
    }

    /// `[1, c, h, w]` tensor.
    pub fn to_nchw(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.data[(y * w + x) * c + ch];
                }
            }
        }
        Tensor::from_parts(vec![1, c, h, w], out)
    }

    /// Item `index` of an NCHW tensor with 1 or 3 channels.
    pub fn from_nchw(t: &Tensor, index: usize) -> Result<Image> {
        let s = t.shape();
        if s.len() != 4 || index >= s[0] {
            return Err(Error::dim("image", Axis::Rank, format!("cannot take item {index} of {s:?}")));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let base = index * c * h * w;
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(y * w + x) * c + ch] = t.data()[base + (ch * h + y) * w + x];
                }
            }
        }
        Image::new(h, w, c, data)
    }

    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Image {
        if oh == self.height && ow == self.width {
            return self.clone();
        }
        let wy = bilinear_weights(self.height, oh);
        let wx = bilinear_weights(self.width, ow);
        Image::from_fn(oh, ow, self.channels, |y, x, c| {
            let (y0, y1, fy) = (wy.lo[y], wy.hi[y], wy.frac[y]);
            let (x0, x1, fx) = (wx.lo[x], wx.hi[x], wx.frac[x]);
            let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
            let bot = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
            top * (1.0 - fy) + bot * fy
        })
    }

    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Image {
        Image::from_fn(oh, ow, self.channels, |y, x, c| {
            self.get(nearest(y, self.height, oh), nearest(x, self.width, ow), c)
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

/// Source index of destination `i` under nearest-neighbour resampling.
pub fn nearest(i: usize, src: usize, dst: usize) -> usize {
    (((i as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1)
}

/// `h x w` indicator, 1 = corrupted / to be inpainted.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::dim("mask", Axis::Rank, format!("{height}x{width} needs {} values, got {}", height * width, data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract(format!("mask values must be 0 or 1, found {v}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, false)
    }

    pub fn filled(height: usize, width: usize, on: bool) -> Self {
        Self {
            height,
            width,
            data: vec![if on { 1.0 } else { 0.0 }; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(if f(y, x) { 1.0 } else { 0.0 });
            }
        }
        Self { height, width, data }
    }

    /// Binarizes probabilities: `p > threshold` becomes 1.
    pub fn threshold(height: usize, width: usize, probs: &[f64], threshold: f64) -> Result<Self> {
        Self::new(height, width, probs.iter().map(|&p| if p > threshold { 1.0 } else { 0.0 }).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1.0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = if on { 1.0 } else { 0.0 };
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// `[1, 1, h, w]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, 1, self.height, self.width], self.data.clone())
    }

    pub fn resize_nearest(&self, oh: usize, ow: usize) -> BinaryMask {
        BinaryMask::from_fn(oh, ow, |y, x| {
            self.get(nearest(y, self.height, oh), nearest(x, self.width, ow))
        })
    }

    /// As a one-channel image with 1.0 where masked.
    pub fn to_image(&self) -> Image {
        Image::new(self.height, self.width, 1, self.data.clone()).expect("dims match")
    }

    /// Pixels above 0.5 of a gray image become masked.
    pub fn from_image(img: &Image) -> BinaryMask {
        BinaryMask::from_fn(img.height(), img.width(), |y, x| img.get(y, x, 0) > 0.5)
    }
}

/// Stacks single-item NCHW tensors along the batch axis.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::contract("cannot stack zero tensors"))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        if t.shape()[1..] != first.shape()[1..] {
            return Err(Error::dim("stack", Axis::Index(1), format!("{:?} vs {:?}", first.shape(), t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    shape[0] = items.iter().map(|t| t.shape()[0]).sum();
    Tensor::new(&shape, data)
}
