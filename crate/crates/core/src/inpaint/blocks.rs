use crate::error::{Axis, Error, Result};
use crate::image::BinaryMask;
use crate::rng::SplitMix64;
use crate::tensor::nn::{Conv2d, Deconv2d};
use crate::tensor::{ConvCfg, ParamStore, Params, Tensor, Var};

/// Floor on the region standard deviation.
pub const REGION_EPS: f64 = 1e-5;

/// `x + conv(relu(dilated_conv(x)))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub dilated: Conv2d,
    pub conv: Conv2d,
}

impl ResBlock {
    pub fn new(prefix: &str, channels: usize, dilation: usize) -> Self {
        Self {
            dilated: Conv2d::same(format!("{prefix}.dilated"), channels, channels, 3, dilation),
            conv: Conv2d::same(format!("{prefix}.conv"), channels, channels, 3, 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        self.dilated.init(store, rng);
        self.conv.init(store, rng);
    }

    pub fn forward<'g>(&self, p: &Params<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.dilated.forward(p, x)?.relu();
        x.add(self.conv.forward(p, h)?)
    }
}

/// Spatial attention over `post`, applied both to `post` (long term) and
/// to the pre-residual features `pre` (short term).
#[derive(Debug, Clone)]
pub struct LongShortAttention {
    pub query: Conv2d,
    pub key: Conv2d,
    pub long: Conv2d,
    pub short: Conv2d,
}

impl LongShortAttention {
    pub fn new(prefix: &str, channels: usize, key_dim: usize) -> Self {
        Self {
            query: Conv2d::pointwise(format!("{prefix}.query"), channels, key_dim),
            key: Conv2d::pointwise(format!("{prefix}.key"), channels, key_dim),
            long: Conv2d::pointwise(format!("{prefix}.long"), channels, channels),
            short: Conv2d::pointwise(format!("{prefix}.short"), channels, channels),
        }
    }

    /// Output projections start at zero, so the block starts as the identity on `post`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        self.query.init(store, rng);
        self.key.init(store, rng);
        self.long.init_zero(store);
        self.short.init_zero(store);
    }

    /// Row-stochastic `[n, hw, hw]` weights over spatial sites.
    pub fn weights<'g>(&self, p: &Params<'g, '_>, post: Var<'g>) -> Result<Var<'g>> {
        let s = post.shape();
        let hw = s[2] * s[3];
        let flat = |v: Var<'g>| -> Result<Var<'g>> {
            let c = v.shape()[1];
            v.reshape(&[s[0], c, hw])
        };
        let q = flat(self.query.forward(p, post)?)?.transpose()?;
        let k = flat(self.key.forward(p, post)?)?;
        let d = q.shape()[2] as f64;
        q.matmul(k)?.scale(1.0 / d.sqrt()).softmax(2)
    }

    pub fn forward<'g>(&self, p: &Params<'g, '_>, pre: Var<'g>, post: Var<'g>) -> Result<Var<'g>> {
        let s = post.shape();
        if pre.shape() != s {
            return Err(Error::dim("long_short_attention", Axis::Rank, format!("{:?} vs {s:?}", pre.shape())));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let a = self.weights(p, post)?;
        // out[:, :, i] = sum_j a[i, j] x[:, :, j]
        let attend = |x: Var<'g>| -> Result<Var<'g>> {
            x.reshape(&[n, c, hw])?.matmul(a.transpose()?)?.reshape(&s)
        };
        let long = self.long.forward(p, attend(post)?)?;
        let short = self.short.forward(p, attend(pre)?)?;
        post.add(long)?.add(short)
    }
}

/// Pre-affine region standardization of `[c, h, w]` or `[n, c, h, w]` features.
pub fn region_normalize(x: &Tensor, m: &BinaryMask) -> Result<Tensor> {
    let (x4, squeeze) = match x.rank() {
        3 => (x.reshape(&[1, x.shape()[0], x.shape()[1], x.shape()[2]])?, true),
        4 => (x.clone(), false),
        _ => return Err(Error::dim("region_normalize", Axis::Rank, format!("{:?}", x.shape()))),
    };
    let s = x4.shape().to_vec();
    if s[2] != m.height() || s[3] != m.width() {
        return Err(Error::dim("region_normalize", Axis::Named("spatial"), "mask size differs"));
    }
    let g = crate::tensor::Graph::new();
    let y = g.constant(x4).region_norm(&m.to_tensor(), REGION_EPS)?.value();
    if squeeze {
        return y.reshape(&s[1..]);
    }
    Ok((*y).clone())
}

/// Mask-gated fusion `up ⊙ m + skip ⊙ (1 - m)`; `m` is `[n, 1, h, w]`.
pub fn tdrb_fuse<'g>(up: Var<'g>, skip: Var<'g>, m: &Tensor) -> Result<Var<'g>> {
    let (su, ss) = (up.shape(), skip.shape());
    if su != ss || su[2] != m.shape()[2] || su[3] != m.shape()[3] {
        return Err(Error::dim(
            "tdrb",
            Axis::Named("spatial"),
            format!("decoder {su:?}, skip {ss:?}, mask {:?}", m.shape()),
        ));
    }
    let g = up.graph();
    let keep = g.constant(m.map(|v| 1.0 - v));
    up.mul(g.constant(m.clone()))?.add(skip.mul(keep)?)
}

/// Top-down refinement block: upsample, mask-gated fusion with the skip
/// features, 1x1 conv, region normalization with a per-channel affine, 3x3 conv.
#[derive(Debug, Clone)]
pub struct Tdrb {
    pub up: Deconv2d,
    pub mix: Conv2d,
    pub refine: Conv2d,
    pub name: String,
    pub channels: usize,
}

impl Tdrb {
    /// Doubles the resolution of `cin`-channel decoder features.
    pub fn upsampling(prefix: &str, cin: usize, cout: usize) -> Self {
        Self::with_deconv(prefix, Deconv2d::upsample2(format!("{prefix}.up"), cin, cout), cout)
    }

    /// Keeps the resolution (3x3 stride-1 transposed conv).
    pub fn refining(prefix: &str, cin: usize, cout: usize) -> Self {
        Self::with_deconv(prefix, Deconv2d::new(format!("{prefix}.up"), cin, cout, 3, ConvCfg::new(1, 1, 1)), cout)
    }

    fn with_deconv(prefix: &str, up: Deconv2d, c: usize) -> Self {
        Self {
            up,
            mix: Conv2d::pointwise(format!("{prefix}.mix"), c, c),
            refine: Conv2d::same(format!("{prefix}.refine"), c, c, 3, 1),
            name: prefix.to_string(),
            channels: c,
        }
    }

    fn gamma(&self) -> String {
        format!("{}.norm.gamma", self.name)
    }

    fn beta(&self) -> String {
        format!("{}.norm.beta", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        self.up.init(store, rng);
        self.mix.init(store, rng);
        self.refine.init(store, rng);
        store.insert(self.gamma(), Tensor::ones(&[1, self.channels, 1, 1]));
        store.insert(self.beta(), Tensor::zeros(&[1, self.channels, 1, 1]));
    }

    /// Decoder features after the transposed conv (before fusion).
    pub fn upsample<'g>(&self, p: &Params<'g, '_>, dec: Var<'g>) -> Result<Var<'g>> {
        self.up.forward(p, dec)
    }

    pub fn forward<'g>(&self, p: &Params<'g, '_>, dec: Var<'g>, skip: Var<'g>, m: &Tensor) -> Result<Var<'g>> {
        let fused = tdrb_fuse(self.upsample(p, dec)?, skip, m)?;
        let mixed = self.mix.forward(p, fused)?;
        let normed = mixed.region_norm(m, REGION_EPS)?.mul(p.get(&self.gamma())?)?.add(p.get(&self.beta())?)?;
        Ok(self.refine.forward(p, normed)?.relu())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn rand(seed: u64, shape: &[usize]) -> Tensor {
        let mut r = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| r.uniform(-1.0, 1.0))
    }

    #[test]
    fn fuse_selection_identities() {
        let g = Graph::new();
        let up = g.constant(rand(1, &[1, 2, 4, 4]));
        let skip = g.constant(rand(2, &[1, 2, 4, 4]));
        let zero = tdrb_fuse(up, skip, &Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        assert_eq!(*zero.value(), *skip.value());
        let one = tdrb_fuse(up, skip, &Tensor::ones(&[1, 1, 4, 4])).unwrap();
        assert_eq!(*one.value(), *up.value());
        assert!(tdrb_fuse(up, skip, &Tensor::ones(&[1, 1, 2, 2])).is_err());
    }

    #[test]
    fn long_short_starts_as_identity() {
        let att = LongShortAttention::new("ls", 3, 2);
        let mut store = ParamStore::new();
        att.init(&mut store, &mut SplitMix64::new(0));
        let g = Graph::new();
        let p = Params::frozen(&g, &store);
        let post = g.constant(rand(3, &[2, 3, 4, 5]));
        let pre = g.constant(rand(4, &[2, 3, 4, 5]));
        let out = att.forward(&p, pre, post).unwrap();
        assert_eq!(*out.value(), *post.value());
        let w = att.weights(&p, post).unwrap().value();
        for row in w.data().chunks(20) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn region_values_one_and_three() {
        let x = Tensor::new(&[1, 1, 2], vec![1.0, 3.0]).unwrap();
        let m = BinaryMask::filled(1, 2, true);
        let y = region_normalize(&x, &m).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn tdrb_shapes() {
        let t = Tdrb::upsampling("t", 4, 2);
        let r = Tdrb::refining("r", 2, 2);
        let mut store = ParamStore::new();
        t.init(&mut store, &mut SplitMix64::new(0));
        r.init(&mut store, &mut SplitMix64::new(1));
        let g = Graph::new();
        let p = Params::frozen(&g, &store);
        let m = Tensor::from_fn(&[1, 1, 8, 8], |i| f64::from(u8::from(i % 3 == 0)));
        let y = t.forward(&p, g.constant(rand(1, &[1, 4, 4, 4])), g.constant(rand(2, &[1, 2, 8, 8])), &m).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 8, 8]);
        let z = r.forward(&p, y, g.constant(rand(3, &[1, 2, 8, 8])), &m).unwrap();
        assert_eq!(z.shape(), vec![1, 2, 8, 8]);
    }
}
