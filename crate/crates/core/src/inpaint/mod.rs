//! Top-down refinement generator.
//!
//! A bottom-up encoder (two downsamplings, dilated residual blocks and a
//! long-short attention merge) feeds a stack of refinement blocks that fuse
//! decoder and skip features under the mask pyramid.

mod blocks;
mod landmarks;

pub use blocks::{region_normalize, tdrb_fuse, LongShortAttention, ResBlock, Tdrb, REGION_EPS};
pub use landmarks::{parse_landmarks, template_points, LandmarkMap, HEATMAP_SIGMA, NUM_LANDMARKS};

use crate::error::{Axis, Error, Result};
use crate::image::{BinaryMask, Image};
use crate::rng::SplitMix64;
use crate::tensor::nn::Conv2d;
use crate::tensor::{concat, ConvCfg, Graph, ParamStore, Params, Tensor, Var};

pub const DILATIONS: [usize; 7] = [1, 2, 4, 8, 4, 2, 1];

#[derive(Debug, Clone, PartialEq)]
pub struct InpainterConfig {
    /// Channels at full, half and quarter resolution.
    pub widths: [usize; 3],
    pub landmarks: usize,
    pub attention_dim: usize,
}

impl Default for InpainterConfig {
    fn default() -> Self {
        Self {
            widths: [64, 128, 256],
            landmarks: NUM_LANDMARKS,
            attention_dim: 32,
        }
    }
}

impl InpainterConfig {
    pub fn toy() -> Self {
        Self {
            widths: [16, 32, 32],
            attention_dim: 8,
            ..Self::default()
        }
    }

    pub fn input_channels(&self) -> usize {
        3 + 1 + self.landmarks
    }
}

/// Nearest-neighbour resized copies of a `[n, 1, h, w]` mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPyramid {
    pub levels: Vec<Tensor>,
}

impl MaskPyramid {
    pub fn new(mask: &Tensor, levels: usize) -> Result<Self> {
        let s = mask.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::dim("mask_pyramid", Axis::Rank, format!("{s:?}")));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let mut out = vec![mask.clone()];
        for l in 1..levels {
            let (oh, ow) = (h >> l, w >> l);
            let mut data = Vec::with_capacity(n * oh * ow);
            for b in 0..n {
                let item = BinaryMask::new(h, w, mask.data()[b * h * w..(b + 1) * h * w].to_vec())?;
                data.extend_from_slice(item.resize_nearest(oh, ow).data());
            }
            out.push(Tensor::new(&[n, 1, oh, ow], data)?);
        }
        Ok(Self { levels: out })
    }
}

/// Encoder skip features (full, 1/2, 1/4) and the attended bottleneck.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<'g> {
    pub levels: [Var<'g>; 3],
    pub bottleneck: Var<'g>,
}

#[derive(Debug, Clone)]
pub struct InpaintTrace<'g> {
    /// Generator output before compositing, in `[0, 1]`.
    pub raw: Var<'g>,
    /// `input ⊙ (1 - m) + raw ⊙ m`.
    pub output: Var<'g>,
    pub pyramid: FeaturePyramid<'g>,
}

#[derive(Debug, Clone)]
pub struct Inpainter {
    pub cfg: InpainterConfig,
    e0: Conv2d,
    e1: Conv2d,
    e2: Conv2d,
    res: Vec<ResBlock>,
    attn: LongShortAttention,
    tdrbs: [Tdrb; 3],
    out: Conv2d,
}

impl Inpainter {
    pub fn new(cfg: InpainterConfig) -> Self {
        let [w0, w1, w2] = cfg.widths;
        Self {
            e0: Conv2d::same("gen.enc0", cfg.input_channels(), w0, 3, 1),
            e1: Conv2d::new("gen.enc1", w0, w1, 3, ConvCfg::new(2, 1, 1)),
            e2: Conv2d::new("gen.enc2", w1, w2, 3, ConvCfg::new(2, 1, 1)),
            res: DILATIONS
                .iter()
                .enumerate()
                .map(|(i, &d)| ResBlock::new(&format!("gen.res{i}"), w2, d))
                .collect(),
            attn: LongShortAttention::new("gen.attn", w2, cfg.attention_dim),
            tdrbs: [
                Tdrb::upsampling("gen.tdrb0", w2, w1),
                Tdrb::upsampling("gen.tdrb1", w1, w0),
                Tdrb::refining("gen.tdrb2", w0, w0),
            ],
            out: Conv2d::same("gen.out", w0, 3, 3, 1),
            cfg,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        self.e0.init(store, rng);
        self.e1.init(store, rng);
        self.e2.init(store, rng);
        for r in &self.res {
            r.init(store, rng);
        }
        self.attn.init(store, rng);
        for t in &self.tdrbs {
            t.init(store, rng);
        }
        self.out.init(store, rng);
    }

    pub fn init_store(&self, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        self.init(&mut s, &mut SplitMix64::new(seed));
        s
    }

    pub fn res_blocks(&self) -> &[ResBlock] {
        &self.res
    }

    pub fn tdrbs(&self) -> &[Tdrb; 3] {
        &self.tdrbs
    }

    fn check_inputs(&self, image: &[usize], mask: &[usize], lm: &[usize]) -> Result<()> {
        let ok = image.len() == 4
            && image[1] == 3
            && image[2].is_multiple_of(4)
            && image[3].is_multiple_of(4)
            && mask == [image[0], 1, image[2], image[3]]
            && lm == [image[0], self.cfg.landmarks, image[2], image[3]];
        if !ok {
            return Err(Error::dim(
                "inpaint",
                Axis::Rank,
                format!("image {image:?}, mask {mask:?}, landmarks {lm:?} (sides must be multiples of 4)"),
            ));
        }
        Ok(())
    }

    pub fn encode<'g>(&self, p: &Params<'g, '_>, image: Var<'g>, mask: &Tensor, lm: &Tensor) -> Result<FeaturePyramid<'g>> {
        self.check_inputs(&image.shape(), mask.shape(), lm.shape())?;
        let g = p.graph();
        let x = concat(&[image, g.constant(mask.clone()), g.constant(lm.clone())], 1)?;
        let f0 = self.e0.forward(p, x)?.relu();
        let f1 = self.e1.forward(p, f0)?.relu();
        let f2 = self.e2.forward(p, f1)?.relu();
        let mut h = f2;
        for r in &self.res {
            h = r.forward(p, h)?;
        }
        let bottleneck = self.attn.forward(p, f2, h)?;
        Ok(FeaturePyramid {
            levels: [f0, f1, f2],
            bottleneck,
        })
    }

    /// `image` is the binary-masked input `[n, 3, h, w]`, `mask` `[n, 1, h, w]`,
    /// `lm` `[n, K, h, w]`.
    pub fn forward<'g>(&self, p: &Params<'g, '_>, image: Var<'g>, mask: &Tensor, lm: &Tensor) -> Result<InpaintTrace<'g>> {
        let pyr = self.encode(p, image, mask, lm)?;
        let masks = MaskPyramid::new(mask, 3)?;
        let d = self.tdrbs[0].forward(p, pyr.bottleneck, pyr.levels[1], &masks.levels[1])?;
        let d = self.tdrbs[1].forward(p, d, pyr.levels[0], &masks.levels[0])?;
        let d = self.tdrbs[2].forward(p, d, pyr.levels[0], &masks.levels[0])?;
        let raw = self.out.forward(p, d)?.tanh().add_scalar(1.0).scale(0.5);
        let g = p.graph();
        let m = g.constant(mask.clone());
        let keep = g.constant(mask.map(|v| 1.0 - v));
        let output = image.mul(keep)?.add(raw.mul(m)?)?;
        Ok(InpaintTrace {
            raw,
            output,
            pyramid: pyr,
        })
    }

    /// Restores one binary-masked image with frozen parameters.
    pub fn generate(&self, store: &ParamStore, image: &Image, mask: &BinaryMask, lm: &LandmarkMap) -> Result<Image> {
        let rgb = image.to_rgb();
        let g = Graph::new();
        let p = Params::frozen(&g, store);
        let tr = self.forward(&p, g.constant(rgb.to_nchw()), &mask.to_tensor(), &lm.to_nchw())?;
        Image::from_nchw(&tr.output.value(), 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_inputs(h: usize, w: usize) -> (Image, BinaryMask, LandmarkMap) {
        let mut r = SplitMix64::new(5);
        let img = Image::from_fn(h, w, 3, |_, _, _| r.next_f64());
        let mask = BinaryMask::from_fn(h, w, |y, x| y >= h / 4 && y < 3 * h / 4 && x >= w / 4 && x < 3 * w / 4);
        (img, mask, LandmarkMap::template(h, w))
    }

    #[test]
    fn pyramid_sizes_and_range() {
        let gen = Inpainter::new(InpainterConfig::toy());
        let store = gen.init_store(0);
        let (img, mask, lm) = toy_inputs(16, 24);
        let g = Graph::new();
        let p = Params::frozen(&g, &store);
        let tr = gen.forward(&p, g.constant(img.to_nchw()), &mask.to_tensor(), &lm.to_nchw()).unwrap();
        let sizes: Vec<Vec<usize>> = tr.pyramid.levels.iter().map(|v| v.shape()[2..].to_vec()).collect();
        assert_eq!(sizes, vec![vec![16, 24], vec![8, 12], vec![4, 6]]);
        assert!(tr.raw.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(tr.output.shape(), vec![1, 3, 16, 24]);
    }

    #[test]
    fn empty_mask_returns_input() {
        let gen = Inpainter::new(InpainterConfig::toy());
        let store = gen.init_store(0);
        let (img, _, lm) = toy_inputs(16, 16);
        let out = gen.generate(&store, &img, &BinaryMask::zeros(16, 16), &lm).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn unmasked_pixels_are_kept() {
        let gen = Inpainter::new(InpainterConfig::toy());
        let store = gen.init_store(1);
        let (img, mask, lm) = toy_inputs(16, 16);
        let out = gen.generate(&store, &img, &mask, &lm).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if !mask.get(y, x) {
                    for c in 0..3 {
                        assert_eq!(out.get(y, x, c), img.get(y, x, c));
                    }
                }
            }
        }
    }

    #[test]
    fn mask_pyramid_is_binary() {
        let m = BinaryMask::from_fn(16, 16, |y, x| (y * 7 + x * 3) % 5 == 0).to_tensor();
        let p = MaskPyramid::new(&m, 3).unwrap();
        assert_eq!(p.levels[2].shape(), &[1, 1, 4, 4]);
        assert!(p.levels.iter().all(|l| l.data().iter().all(|&v| v == 0.0 || v == 1.0)));
    }
}
