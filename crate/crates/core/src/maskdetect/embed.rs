use crate::error::{Axis, Error, Result};
use crate::tensor::nn::Conv2d;
use crate::tensor::{Params, Tensor, Var};

/// Token sequence produced by [`patch_embed`].
///
/// Tokens are kept as `[n * P, C, ph, pw]` feature planes so the per-token
/// projections run as 1x1 convolutions; flattening a token gives its
/// `Q = C * ph * pw` dimensional embedding.
#[derive(Debug, Clone, Copy)]
pub struct PatchSequence<'g> {
    pub tokens: Var<'g>,
    pub batch: usize,
    /// Grid side: `P = grid * grid`.
    pub grid: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
}

impl PatchSequence<'_> {
    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn embed_dim(&self) -> usize {
        self.channels * self.patch_h * self.patch_w
    }
}

/// `[n, c, h, w] -> [n * grid², c, h / grid, w / grid]`, patches in raster order.
pub fn patchify<'g>(x: Var<'g>, grid: usize) -> Result<Var<'g>> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % grid != 0 || w % grid != 0 {
        return Err(Error::dim("patchify", Axis::Named("spatial"), format!("{h}x{w} not divisible by grid {grid}")));
    }
    let (ph, pw) = (h / grid, w / grid);
    x.reshape(&[n, c, grid, ph, grid, pw])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[n * grid * grid, c, ph, pw])
}

/// Inverse of [`patchify`].
pub fn unpatchify<'g>(x: Var<'g>, batch: usize, grid: usize) -> Result<Var<'g>> {
    let s = x.shape();
    let (c, ph, pw) = (s[1], s[2], s[3]);
    x.reshape(&[batch, grid, grid, c, ph, pw])?
        .permute(&[0, 3, 1, 4, 2, 5])?
        .reshape(&[batch, c, grid * ph, grid * pw])
}

/// Fixed sinusoidal encoding, `[P, Q]`.
pub fn position_encoding(patches: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[patches, dim], |i| {
        let (p, j) = (i / dim, i % dim);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        let angle = p as f64 * freq;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Splits images into a `grid x grid` raster of patches, embeds each patch
/// with a 3x3 conv stem (patches do not see each other) and adds the fixed
/// position encoding.
pub fn patch_embed<'g>(p: &Params<'g, '_>, stem: &Conv2d, images: Var<'g>, grid: usize) -> Result<PatchSequence<'g>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::dim("patch_embed", Axis::Rank, format!("expected NCHW, got {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::dim("patch_embed", Axis::Named("spatial"), format!("{h}x{w} not divisible by 8")));
    }
    let patches = patchify(images, grid)?;
    let emb = stem.forward(p, patches)?.relu();
    let es = emb.shape();
    let (c, ph, pw) = (es[1], es[2], es[3]);
    let big_p = grid * grid;
    let q = c * ph * pw;
    let pe = p.graph().constant(position_encoding(big_p, q));
    let tokens = emb.reshape(&[n, big_p, q])?.add(pe)?.reshape(&[n * big_p, c, ph, pw])?;
    Ok(PatchSequence {
        tokens,
        batch: n,
        grid,
        patch_h: ph,
        patch_w: pw,
        channels: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn patchify_round_trip() {
        let g = Graph::new();
        let t = Tensor::from_fn(&[2, 3, 8, 16], |i| i as f64);
        let x = g.constant(t.clone());
        let p = patchify(x, 4).unwrap();
        assert_eq!(p.shape(), vec![32, 3, 2, 4]);
        // Patch (row 1, col 2) of item 0 starts at pixel (2, 8).
        assert_eq!(p.value().at(&[6, 1, 0, 0]), t.at(&[0, 1, 2, 8]));
        let back = unpatchify(p, 2, 4).unwrap();
        assert_eq!(*back.value(), t);
    }

    #[test]
    fn encoding_is_bounded_and_distinct() {
        let pe = position_encoding(64, 32);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(&pe.data()[..32], &pe.data()[32..64]);
    }
}
