//! Transformer mask detector.
//!
//! Image patches become tokens, `L` encoder layers mix them with attention
//! fused from pixel and high-pass frequency cues, and a patch-similarity edge
//! map sharpens the reassembled feature map before it is upsampled to a
//! per-pixel corruption probability.

mod attention;
mod embed;
mod head;
mod loss;

pub use attention::{
    attention_logits, dual_attention, init_fuse_passthrough, self_attention, EncoderLayer, FrequencyAttention,
    LayerAttention,
};
pub use embed::{patch_embed, patchify, position_encoding, unpatchify, PatchSequence};
pub use head::{edge_fuse, patch_similarity, UpsampleHead};
pub use loss::{detection_loss, BCE_CLAMP, DICE_EPS};

use crate::error::{Error, Result};
use crate::frequency::{frequency_representation, HighPassConfig};
use crate::image::{BinaryMask, Image};
use crate::rng::SplitMix64;
use crate::tensor::nn::Conv2d;
use crate::tensor::{Graph, ParamStore, Params, Tensor, Var};

/// Mask probability threshold.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Patch grid side; `P = grid²`.
    pub grid: usize,
    /// Token channels. A token has `embed_channels * (H / grid) * (W / grid)` entries.
    pub embed_channels: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    /// Frequency attention maps; 0 disables the frequency path.
    pub freq_channels: usize,
    pub freq_width: usize,
    pub freq_dim: usize,
    /// Channels of the reassembled feature map.
    pub feature_channels: usize,
    pub head_widths: [usize; 3],
    pub high_pass: HighPassConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            embed_channels: 64,
            heads: 4,
            layers: 4,
            mlp_ratio: 2,
            freq_channels: 2,
            freq_width: 16,
            freq_dim: 16,
            feature_channels: 64,
            head_widths: [64, 32, 16],
            high_pass: HighPassConfig::default(),
        }
    }
}

impl DetectorConfig {
    /// Small widths for desk-scale training at 64x64.
    pub fn toy() -> Self {
        Self {
            embed_channels: 48,
            heads: 2,
            layers: 2,
            freq_width: 8,
            freq_dim: 8,
            feature_channels: 48,
            head_widths: [32, 32, 16],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.layers == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("detector grid, layers, heads and mlp_ratio must be positive".into()));
        }
        if !self.embed_channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_channels {} not divisible by heads {}",
                self.embed_channels, self.heads
            )));
        }
        Ok(())
    }
}

/// Plain-tensor detector result for a single image.
#[derive(Debug, Clone)]
pub struct DetectorOutput {
    /// `[h, w]`.
    pub mask_logits: Tensor,
    pub mask_prob: Tensor,
    /// `[h / 8, w / 8]`.
    pub edge_map: Tensor,
    /// `[c, h / 8, w / 8]`.
    pub feature_map: Tensor,
    /// Dual attention of the last layer, `[heads, P, P]`.
    pub attention: Tensor,
}

impl DetectorOutput {
    pub fn mask(&self) -> BinaryMask {
        let s = self.mask_prob.shape();
        BinaryMask::threshold(s[0], s[1], self.mask_prob.data(), MASK_THRESHOLD).expect("shape matches")
    }
}

/// Graph-level forward results for a batch.
#[derive(Debug, Clone)]
pub struct DetectorTrace<'g> {
    pub logits: Var<'g>,
    pub prob: Var<'g>,
    pub edge: Var<'g>,
    pub features: Var<'g>,
    pub attention: Vec<LayerAttention<'g>>,
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub prefix: String,
    stem: Conv2d,
    layers: Vec<EncoderLayer>,
    freq: Option<FrequencyAttention>,
    project: Conv2d,
    head: UpsampleHead,
    height: usize,
    width: usize,
}

impl Detector {
    /// Builds the layer layout for `height x width` inputs.
    pub fn new(cfg: DetectorConfig, height: usize, width: usize) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.grid;
        if !height.is_multiple_of(8) || !width.is_multiple_of(8) || !height.is_multiple_of(g) || !width.is_multiple_of(g) {
            return Err(Error::dim(
                "detector",
                crate::error::Axis::Named("spatial"),
                format!("{height}x{width} must be divisible by 8 and grid {g}"),
            ));
        }
        let prefix = "det".to_string();
        let c = cfg.embed_channels;
        let freq = (cfg.freq_channels > 0).then(|| {
            FrequencyAttention::new(
                &format!("{prefix}.freq"),
                (height / g).max(width / g),
                g,
                cfg.freq_width,
                cfg.freq_channels,
                cfg.freq_dim,
            )
        });
        Ok(Self {
            stem: Conv2d::same(format!("{prefix}.stem"), 3, c, 3, 1),
            layers: (0..cfg.layers)
                .map(|l| EncoderLayer::new(&format!("{prefix}.enc{l}"), c, cfg.heads, cfg.freq_channels, cfg.mlp_ratio))
                .collect(),
            freq,
            project: Conv2d::pointwise(format!("{prefix}.project"), c, cfg.feature_channels),
            head: UpsampleHead::new(&format!("{prefix}.head"), cfg.feature_channels, cfg.head_widths),
            prefix,
            cfg,
            height,
            width,
        })
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        self.stem.init(store, rng);
        if let Some(f) = &self.freq {
            f.init(store, rng);
        }
        for l in &self.layers {
            l.init(store, rng);
        }
        self.project.init(store, rng);
        self.head.init(store, rng);
    }

    pub fn init_store(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        self.init(&mut store, &mut SplitMix64::new(seed));
        store
    }

    /// Encoder stack: tokens to the reassembled `[n, feature_channels, h / 8, w / 8]` map.
    pub fn encode<'g>(
        &self,
        p: &Params<'g, '_>,
        seq: PatchSequence<'g>,
        freq: Option<Var<'g>>,
    ) -> Result<(Var<'g>, Vec<LayerAttention<'g>>)> {
        let freq_attn = match (&self.freq, freq) {
            (Some(f), Some(x)) => Some(f.forward(p, x)?),
            _ => None,
        };
        let mut seq = seq;
        let mut maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, a) = layer.forward(p, seq, freq_attn)?;
            seq = next;
            maps.push(a);
        }
        let full = unpatchify(seq.tokens, seq.batch, seq.grid)?;
        let t = self.project.forward(p, full.avg_pool(8)?)?;
        Ok((t, maps))
    }

    /// `images` is `[n, 3, h, w]` in `[0, 1]`, `freq` the matching `[n, 1, h, w]`
    /// high-pass representation.
    pub fn forward<'g>(&self, p: &Params<'g, '_>, images: Var<'g>, freq: Var<'g>) -> Result<DetectorTrace<'g>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.height || s[3] != self.width {
            return Err(Error::dim(
                "detector",
                crate::error::Axis::Rank,
                format!("expected [n, 3, {}, {}], got {s:?}", self.height, self.width),
            ));
        }
        let seq = patch_embed(p, &self.stem, images, self.cfg.grid)?;
        let (features, attention) = self.encode(p, seq, self.freq.as_ref().map(|_| freq))?;
        let (fused, edge) = edge_fuse(features)?;
        let logits = self.head.forward(p, fused)?;
        Ok(DetectorTrace {
            prob: logits.sigmoid(),
            logits,
            edge,
            features,
            attention,
        })
    }

    /// High-pass representations stacked as `[n, 1, h, w]`.
    pub fn frequency_batch(&self, images: &[Image]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * self.height * self.width);
        for img in images {
            let f = frequency_representation(img, self.cfg.high_pass);
            data.extend_from_slice(f.data());
        }
        Tensor::new(&[images.len(), 1, self.height, self.width], data)
    }

    /// Inference on one image with frozen parameters.
    pub fn detect(&self, store: &ParamStore, image: &Image) -> Result<DetectorOutput> {
        let rgb = image.to_rgb();
        let g = Graph::new();
        let p = Params::frozen(&g, store);
        let x = g.constant(rgb.to_nchw());
        let f = g.constant(self.frequency_batch(std::slice::from_ref(&rgb))?);
        let tr = self.forward(&p, x, f)?;
        let (h, w) = (self.height, self.width);
        let last = tr.attention.last().expect("at least one layer").dual.value();
        let ls = last.shape().to_vec();
        Ok(DetectorOutput {
            mask_logits: tr.logits.value().reshape(&[h, w])?,
            mask_prob: tr.prob.value().reshape(&[h, w])?,
            edge_map: tr.edge.value().reshape(&[h / 8, w / 8])?,
            feature_map: tr.features.value().reshape(&[self.cfg.feature_channels, h / 8, w / 8])?,
            attention: last.reshape(&ls[1..])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> Image {
        let mut r = SplitMix64::new(seed);
        Image::from_fn(64, 64, 3, |_, _, _| r.next_f64())
    }

    #[test]
    fn default_token_size_at_64() {
        let det = Detector::new(DetectorConfig::default(), 64, 64).unwrap();
        let store = det.init_store(0);
        let g = Graph::new();
        let p = Params::frozen(&g, &store);
        let x = g.constant(image(1).to_nchw());
        let seq = patch_embed(&p, &det.stem, x, 8).unwrap();
        assert_eq!(seq.num_patches(), 64);
        assert_eq!(seq.embed_dim(), 4096);
    }

    #[test]
    fn toy_shapes_and_determinism() {
        let det = Detector::new(DetectorConfig::toy(), 64, 64).unwrap();
        let store = det.init_store(7);
        let a = det.detect(&store, &image(2)).unwrap();
        let b = det.detect(&store, &image(2)).unwrap();
        assert_eq!(a.mask_prob.shape(), &[64, 64]);
        assert_eq!(a.edge_map.shape(), &[8, 8]);
        assert_eq!(a.feature_map.shape(), &[48, 8, 8]);
        assert_eq!(a.attention.shape(), &[2, 64, 64]);
        assert_eq!(a.mask_logits, b.mask_logits);
        assert!(a.mask_prob.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_indivisible_size() {
        assert!(Detector::new(DetectorConfig::toy(), 60, 64).is_err());
        assert!(Detector::new(DetectorConfig { heads: 5, ..DetectorConfig::toy() }, 64, 64).is_err());
    }
}
