//! Generator objectives: masked reconstruction, perceptual, style, total
//! variation and their weighted sum.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::nn::Conv2d;
use crate::tensor::{ConvCfg, Graph, ParamStore, Params, Tensor, Var};

/// Default channel widths of the five extractor stages.
pub const STAGE_CHANNELS: [usize; 5] = [16, 32, 64, 128, 256];

/// Frozen random conv tower used as the deep-feature backbone.
///
/// Stage 0 keeps the input resolution, every later stage halves it. Biases
/// are zero, so an all-zero input produces all-zero features.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stages: Vec<Conv2d>,
    store: ParamStore,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        Self::with_channels(seed, STAGE_CHANNELS)
    }

    pub fn with_channels(seed: u64, channels: [usize; 5]) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let stride = if i == 0 { 1 } else { 2 };
                let conv = Conv2d::new(format!("fx.stage{i}"), cin, c, 3, ConvCfg::new(stride, 1, 1));
                conv.init(&mut store, &mut rng);
                cin = c;
                conv
            })
            .collect();
        Self { stages, store }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Activations of all five stages for `[n, 3, h, w]` input.
    pub fn features<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Vec<Var<'g>>> {
        let p = Params::frozen(g, &self.store);
        let mut out = Vec::with_capacity(self.stages.len());
        let mut x = x;
        for s in &self.stages {
            x = s.forward(&p, x)?.relu();
            out.push(x);
        }
        Ok(out)
    }

    /// Plain-tensor evaluation.
    pub fn eval(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let g = Graph::new();
        Ok(self
            .features(&g, g.constant(x.clone()))?
            .into_iter()
            .map(|v| (*v.value()).clone())
            .collect())
    }
}

/// Gram matrices `phi phiᵀ` per image: `[n, c, h, w] -> [n, c, c]`.
pub fn gram<'g>(phi: Var<'g>) -> Result<Var<'g>> {
    let s = phi.shape();
    let flat = phi.reshape(&[s[0], s[1], s[2] * s[3]])?;
    flat.matmul(flat.transpose()?)
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::contract(format!("{op}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Broadcasts a `[n, 1, h, w]` mask across the image channels.
fn expand_mask(mask: &Tensor, channels: usize) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::contract(format!("mask must be [n, 1, h, w], got {s:?}")));
    }
    let plane = s[2] * s[3];
    let mut data = Vec::with_capacity(mask.len() * channels);
    for item in mask.data().chunks(plane) {
        for _ in 0..channels {
            data.extend_from_slice(item);
        }
    }
    Tensor::new(&[s[0], channels, s[2], s[3]], data)
}

/// `‖(pred - gt) ⊙ m‖₁ / N_m`, with `N_m` the number of masked elements
/// over all channels. An empty mask gives 0.
pub fn reconstruction_loss<'g>(pred: Var<'g>, gt: Var<'g>, mask: &Tensor) -> Result<Var<'g>> {
    let s = pred.shape();
    same_shape("reconstruction_loss", &s, &gt.shape())?;
    let m = expand_mask(mask, s[1])?;
    same_shape("reconstruction_loss", &s, m.shape())?;
    let count = m.sum();
    let diff = pred.sub(gt)?.mul(pred.graph().constant(m))?.abs().sum();
    if count == 0.0 {
        return Ok(diff.scale(0.0));
    }
    Ok(diff.scale(1.0 / count))
}

/// Stage-wise mean absolute feature difference, summed over stages.
pub fn perceptual_loss<'g>(pred: Var<'g>, gt: Var<'g>, fx: &FeatureExtractor) -> Result<Var<'g>> {
    same_shape("perceptual_loss", &pred.shape(), &gt.shape())?;
    let g = pred.graph();
    let a = fx.features(g, pred)?;
    let b = fx.features(g, gt)?;
    let mut total: Option<Var<'g>> = None;
    for (x, y) in a.into_iter().zip(b) {
        let term = x.sub(y)?.abs().mean();
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("five stages"))
}

/// Gram-matrix distance of the masked inputs, normalized per stage by
/// `1 / c²` outside and `1 / (c h w)` inside the norm.
pub fn style_loss<'g>(pred: Var<'g>, gt: Var<'g>, mask: &Tensor, fx: &FeatureExtractor) -> Result<Var<'g>> {
    let s = pred.shape();
    same_shape("style_loss", &s, &gt.shape())?;
    let g = pred.graph();
    let m = g.constant(expand_mask(mask, s[1])?);
    let a = fx.features(g, pred.mul(m)?)?;
    let b = fx.features(g, gt.mul(m)?)?;
    let mut total: Option<Var<'g>> = None;
    for (x, y) in a.into_iter().zip(b) {
        let fs = x.shape();
        let (c, hw) = (fs[1] as f64, (fs[2] * fs[3]) as f64);
        let diff = gram(x)?.sub(gram(y)?)?.scale(1.0 / (c * hw));
        // Summed over the batch, so a single image matches the per-image form.
        let term = diff.abs().sum().scale(1.0 / (c * c * fs[0] as f64));
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("five stages"))
}

/// Anisotropic total variation with forward differences, divided by the
/// element count.
pub fn tv_loss<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    let n = s.iter().product::<usize>() as f64;
    let (h, w) = (s[2], s[3]);
    let mut total = x.sum().scale(0.0);
    if w > 1 {
        let d = x.narrow(3, 1, w - 1)?.sub(x.narrow(3, 0, w - 1)?)?;
        total = total.add(d.abs().sum())?;
    }
    if h > 1 {
        let d = x.narrow(2, 1, h - 1)?.sub(x.narrow(2, 0, h - 1)?)?;
        total = total.add(d.abs().sum())?;
    }
    Ok(total.scale(1.0 / n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub recons: f64,
    pub adv: f64,
    pub perc: f64,
    pub style: f64,
    pub tv: f64,
}

impl LossWeights {
    pub fn celeba_hq() -> Self {
        Self {
            recons: 1.0,
            adv: 0.01,
            perc: 0.1,
            style: 250.0,
            tv: 0.1,
        }
    }

    pub fn celeba() -> Self {
        Self {
            recons: 5.0,
            ..Self::celeba_hq()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "celeba_hq" => Ok(Self::celeba_hq()),
            "celeba" => Ok(Self::celeba()),
            other => Err(Error::Config(format!("unknown loss preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.recons, self.adv, self.perc, self.style, self.tv];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {all:?}")));
        }
        Ok(())
    }

    /// Weighted sum of plain component values, in the same order as [`total_loss`].
    pub fn combine(&self, terms: [f64; 5]) -> f64 {
        let w = [self.recons, self.adv, self.perc, self.style, self.tv];
        w.iter().zip(terms).fold(0.0, |acc, (w, t)| acc + w * t)
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::celeba_hq()
    }
}

/// Individual generator objective terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'g> {
    pub recons: Var<'g>,
    pub adv: Var<'g>,
    pub perc: Var<'g>,
    pub style: Var<'g>,
    pub tv: Var<'g>,
}

impl<'g> LossTerms<'g> {
    pub fn values(&self) -> [f64; 5] {
        [self.recons, self.adv, self.perc, self.style, self.tv].map(|v| v.value().item())
    }
}

pub fn total_loss<'g>(terms: &LossTerms<'g>, w: &LossWeights) -> Result<Var<'g>> {
    let parts = [
        (terms.recons, w.recons),
        (terms.adv, w.adv),
        (terms.perc, w.perc),
        (terms.style, w.style),
        (terms.tv, w.tv),
    ];
    let mut acc = terms.recons.graph().constant(Tensor::scalar(0.0));
    for (v, k) in parts {
        acc = acc.add(v.scale(k))?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_img(seed: u64, shape: &[usize]) -> Tensor {
        let mut r = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| r.next_f64())
    }

    #[test]
    fn extractor_stage_shapes() {
        let fx = FeatureExtractor::new(1);
        let feats = fx.eval(&rand_img(0, &[1, 3, 32, 32])).unwrap();
        let sizes: Vec<Vec<usize>> = feats.iter().map(|f| f.shape().to_vec()).collect();
        assert_eq!(
            sizes,
            vec![vec![1, 16, 32, 32], vec![1, 32, 16, 16], vec![1, 64, 8, 8], vec![1, 128, 4, 4], vec![1, 256, 2, 2]]
        );
        assert_eq!(feats, FeatureExtractor::new(1).eval(&rand_img(0, &[1, 3, 32, 32])).unwrap());
    }

    #[test]
    fn reconstruction_counts_elements() {
        let g = Graph::new();
        let gt = rand_img(1, &[1, 3, 4, 4]);
        let mask = Tensor::from_fn(&[1, 1, 4, 4], |i| f64::from(u8::from(i < 6)));
        let m3 = expand_mask(&mask, 3).unwrap();
        let pred: Vec<f64> = gt.data().iter().zip(m3.data()).map(|(v, m)| v + 0.5 * m).collect();
        let pred = g.constant(Tensor::new(&[1, 3, 4, 4], pred).unwrap());
        let l = reconstruction_loss(pred, g.constant(gt.clone()), &mask).unwrap();
        assert!((l.value().item() - 0.5).abs() < 1e-12);
        let empty = reconstruction_loss(pred, g.constant(gt), &Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        assert_eq!(empty.value().item(), 0.0);
    }

    #[test]
    fn tv_step_edge() {
        let (h, w) = (5, 7);
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, h, w], |i| f64::from(u8::from(i % w >= 3))));
        let l = tv_loss(x).unwrap().value().item();
        assert!((l - 1.0 / w as f64).abs() < 1e-15);
        assert_eq!(tv_loss(g.constant(Tensor::full(&[1, 3, 4, 4], 0.2))).unwrap().value().item(), 0.0);
    }

    #[test]
    fn identical_inputs_give_zero() {
        let fx = FeatureExtractor::with_channels(2, [4, 4, 4, 4, 4]);
        let g = Graph::new();
        let a = g.constant(rand_img(3, &[2, 3, 16, 16]));
        let mask = Tensor::from_fn(&[2, 1, 16, 16], |i| f64::from(u8::from(i % 3 == 0)));
        assert_eq!(perceptual_loss(a, a, &fx).unwrap().value().item(), 0.0);
        assert_eq!(style_loss(a, a, &mask, &fx).unwrap().value().item(), 0.0);
        assert_eq!(reconstruction_loss(a, a, &mask).unwrap().value().item(), 0.0);
    }

    #[test]
    fn style_with_empty_mask_is_zero() {
        let fx = FeatureExtractor::with_channels(2, [4, 4, 4, 4, 4]);
        let g = Graph::new();
        let a = g.constant(rand_img(3, &[1, 3, 16, 16]));
        let b = g.constant(rand_img(4, &[1, 3, 16, 16]));
        let l = style_loss(a, b, &Tensor::zeros(&[1, 1, 16, 16]), &fx).unwrap();
        assert_eq!(l.value().item(), 0.0);
    }

    #[test]
    fn preset_sums() {
        assert_eq!(LossWeights::celeba_hq().combine([1.0; 5]), 251.21);
        assert_eq!(LossWeights::celeba().combine([1.0; 5]), 255.21);
        let g = Graph::new();
        let one = g.constant(Tensor::scalar(1.0));
        let terms = LossTerms {
            recons: one,
            adv: one,
            perc: one,
            style: one,
            tv: one,
        };
        assert_eq!(total_loss(&terms, &LossWeights::celeba_hq()).unwrap().value().item(), 251.21);
        assert!(LossWeights::preset("vgg").is_err());
    }
}
