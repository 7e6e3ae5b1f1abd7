//! Self-attention, frequency attention and their fusion (dual attention).

use super::embed::{patchify, PatchSequence};
use crate::error::Result;
use crate::tensor::nn::Conv2d;
use crate::tensor::{concat, ConvCfg, ParamStore, Params, Tensor, Var};
use crate::rng::SplitMix64;

/// Scaled scores `q_i · k_j / sqrt(d)` for `[b, P, d]` queries and keys.
pub fn attention_logits<'g>(q: Var<'g>, k: Var<'g>) -> Result<Var<'g>> {
    let d = *q.shape().last().expect("rank 3");
    Ok(q.matmul(k.transpose()?)?.scale(1.0 / (d as f64).sqrt()))
}

/// Row softmax of [`attention_logits`].
pub fn self_attention<'g>(q: Var<'g>, k: Var<'g>) -> Result<Var<'g>> {
    attention_logits(q, k)?.softmax(2)
}

/// `[n * P, C, ph, pw]` token planes to per-head rows `[n * heads, P, C / heads * ph * pw]`.
fn split_heads<'g>(x: Var<'g>, batch: usize, patches: usize, heads: usize) -> Result<Var<'g>> {
    let s = x.shape();
    let d = s[1] / heads * s[2] * s[3];
    x.reshape(&[batch, patches, heads, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[batch * heads, patches, d])
}

fn merge_heads<'g>(x: Var<'g>, batch: usize, heads: usize, token_shape: [usize; 3]) -> Result<Var<'g>> {
    let s = x.shape();
    let (patches, d) = (s[1], s[2]);
    let [c, ph, pw] = token_shape;
    x.reshape(&[batch, heads, patches, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[batch * patches, c, ph, pw])
}

/// Strided conv tower over the high-pass representation, run patch by patch,
/// followed by pairwise bilinear scoring into `channels` maps of `P x P`.
#[derive(Debug, Clone)]
pub struct FrequencyAttention {
    pub tower: Vec<Conv2d>,
    pub left: Conv2d,
    pub right: Conv2d,
    pub grid: usize,
    pub channels: usize,
    pub dim: usize,
}

impl FrequencyAttention {
    pub fn new(prefix: &str, patch: usize, grid: usize, width: usize, channels: usize, dim: usize) -> Self {
        let mut tower = Vec::new();
        let mut side = patch;
        let mut cin = 1;
        while side > 1 || tower.is_empty() {
            tower.push(Conv2d::new(format!("{prefix}.tower{}", tower.len()), cin, width, 3, ConvCfg::new(2, 1, 1)));
            cin = width;
            side = side.div_ceil(2);
        }
        Self {
            tower,
            left: Conv2d::pointwise(format!("{prefix}.left"), width, channels * dim),
            right: Conv2d::pointwise(format!("{prefix}.right"), width, channels * dim),
            grid,
            channels,
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        for c in &self.tower {
            c.init(store, rng);
        }
        self.left.init(store, rng);
        self.right.init(store, rng);
    }

    /// `[n, 1, h, w]` frequency representation to `[n, C, P, P]`.
    pub fn forward<'g>(&self, p: &Params<'g, '_>, freq: Var<'g>) -> Result<Var<'g>> {
        let n = freq.shape()[0];
        let big_p = self.grid * self.grid;
        let mut x = patchify(freq, self.grid)?;
        for conv in &self.tower {
            x = conv.forward(p, x)?.relu();
        }
        // Global mean over whatever spatial extent remains.
        let s = x.shape();
        let x = x.reshape(&[s[0], s[1], s[2] * s[3]])?.mean_axis(2)?.reshape(&[s[0], s[1], 1, 1])?;
        let rows = |v: Var<'g>| -> Result<Var<'g>> {
            v.reshape(&[n, big_p, self.channels, self.dim])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[n * self.channels, big_p, self.dim])
        };
        let a = rows(self.left.forward(p, x)?)?;
        let b = rows(self.right.forward(p, x)?)?;
        a.matmul(b.transpose()?)?
            .scale(1.0 / (self.dim as f64).sqrt())
            .reshape(&[n, self.channels, big_p, big_p])
    }
}

/// 1x1 fusion of the self-attention scores `[n, heads, P, P]` with the
/// frequency maps `[n, C, P, P]` back to `heads` channels, then a row softmax.
/// With the pass-through init and no frequency maps this is exactly the
/// self-attention.
pub fn dual_attention<'g>(p: &Params<'g, '_>, fuse: &Conv2d, logits: Var<'g>, freq: Option<Var<'g>>) -> Result<Var<'g>> {
    let stacked = match freq {
        Some(f) => concat(&[logits, f], 1)?,
        None => logits,
    };
    fuse.forward(p, stacked)?.softmax(3)
}

/// Fusion weights that pass attention channels through and ignore frequency ones.
pub fn init_fuse_passthrough(fuse: &Conv2d, store: &mut ParamStore) {
    let (out, inp) = (fuse.cout, fuse.cin);
    store.insert(
        fuse.weight_name(),
        Tensor::from_fn(&[out, inp, 1, 1], |i| if i / inp == i % inp { 1.0 } else { 0.0 }),
    );
    store.insert(fuse.bias_name(), Tensor::zeros(&[out]));
}

/// One encoder layer: dual-attention weighted values with a residual, then
/// a two-layer pointwise MLP with a residual.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub fuse: Conv2d,
    pub mlp_in: Conv2d,
    pub mlp_out: Conv2d,
    pub heads: usize,
}

/// Attention maps produced by one layer, `[n, heads, P, P]` each.
#[derive(Debug, Clone, Copy)]
pub struct LayerAttention<'g> {
    pub self_attn: Var<'g>,
    pub dual: Var<'g>,
}

impl EncoderLayer {
    pub fn new(prefix: &str, channels: usize, heads: usize, freq_channels: usize, mlp_ratio: usize) -> Self {
        Self {
            q: Conv2d::pointwise(format!("{prefix}.q"), channels, channels),
            k: Conv2d::pointwise(format!("{prefix}.k"), channels, channels),
            v: Conv2d::pointwise(format!("{prefix}.v"), channels, channels),
            fuse: Conv2d::pointwise(format!("{prefix}.fuse"), heads + freq_channels, heads),
            mlp_in: Conv2d::pointwise(format!("{prefix}.mlp_in"), channels, channels * mlp_ratio),
            mlp_out: Conv2d::pointwise(format!("{prefix}.mlp_out"), channels * mlp_ratio, channels),
            heads,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        for c in [&self.q, &self.k, &self.v, &self.mlp_in] {
            c.init(store, rng);
        }
        // Residual branches start closed.
        self.mlp_out.init_zero(store);
        init_fuse_passthrough(&self.fuse, store);
    }

    pub fn forward<'g>(
        &self,
        p: &Params<'g, '_>,
        seq: PatchSequence<'g>,
        freq_attn: Option<Var<'g>>,
    ) -> Result<(PatchSequence<'g>, LayerAttention<'g>)> {
        let (n, big_p, h) = (seq.batch, seq.num_patches(), self.heads);
        let x = seq.tokens;
        let q = split_heads(self.q.forward(p, x)?, n, big_p, h)?;
        let k = split_heads(self.k.forward(p, x)?, n, big_p, h)?;
        let v = split_heads(self.v.forward(p, x)?, n, big_p, h)?;
        let logits = attention_logits(q, k)?.reshape(&[n, h, big_p, big_p])?;
        let attn = logits.softmax(3)?;
        let dual = dual_attention(p, &self.fuse, logits, freq_attn)?;
        let mixed = dual.reshape(&[n * h, big_p, big_p])?.matmul(v)?;
        let mixed = merge_heads(mixed, n, h, [seq.channels, seq.patch_h, seq.patch_w])?;
        let x = x.add(mixed)?;
        let hidden = self.mlp_in.forward(p, x)?.relu();
        let x = x.add(self.mlp_out.forward(p, hidden)?)?;
        Ok((PatchSequence { tokens: x, ..seq }, LayerAttention { self_attn: attn, dual }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn zero_queries_give_uniform_rows() {
        let g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 5, 3]));
        let a = self_attention(q, q).unwrap();
        assert!(a.value().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn two_patch_hand_example() {
        let g = Graph::new();
        let q = g.constant(Tensor::new(&[1, 2, 1], vec![1.0, 0.0]).unwrap());
        let a = self_attention(q, q).unwrap();
        let e = std::f64::consts::E;
        assert!((a.value().data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((a.value().data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((a.value().data()[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn heads_split_and_merge_are_inverse() {
        let g = Graph::new();
        let t = Tensor::from_fn(&[2 * 4, 6, 2, 2], |i| i as f64);
        let x = g.constant(t.clone());
        let s = split_heads(x, 2, 4, 3).unwrap();
        assert_eq!(s.shape(), vec![6, 4, 8]);
        let back = merge_heads(s, 2, 3, [6, 2, 2]).unwrap();
        assert_eq!(*back.value(), t);
    }
}
