use crate::error::Result;
use crate::rng::SplitMix64;
use crate::tensor::nn::Conv2d;
use crate::tensor::{ParamStore, Params, Var};

/// Edge map `E` from feature map `T` (`[n, c, h, w] -> [n, 1, h, w]`).
pub fn patch_similarity<'g>(t: Var<'g>) -> Result<Var<'g>> {
    t.patch_similarity()
}

/// `T + E`, with `E` broadcast over channels.
pub fn edge_fuse<'g>(t: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let e = patch_similarity(t)?;
    Ok((t.add(e)?, e))
}

/// Three (x2 bilinear, 1x1 conv, relu) stages then a 1x1 conv to logits.
#[derive(Debug, Clone)]
pub struct UpsampleHead {
    pub stages: Vec<Conv2d>,
    pub out: Conv2d,
}

impl UpsampleHead {
    pub fn new(prefix: &str, cin: usize, widths: [usize; 3]) -> Self {
        let mut stages = Vec::new();
        let mut c = cin;
        for (i, &w) in widths.iter().enumerate() {
            stages.push(Conv2d::pointwise(format!("{prefix}.up{i}"), c, w));
            c = w;
        }
        Self {
            stages,
            out: Conv2d::pointwise(format!("{prefix}.out"), c, 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        for s in &self.stages {
            s.init(store, rng);
        }
        self.out.init(store, rng);
    }

    pub fn forward<'g>(&self, p: &Params<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let mut x = x;
        for s in &self.stages {
            x = s.forward(p, x.bilinear_upsample(2)?)?.relu();
        }
        self.out.forward(p, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn constant_input_zero_logits() {
        let head = UpsampleHead::new("h", 4, [4, 4, 4]);
        let mut store = ParamStore::new();
        head.init(&mut store, &mut SplitMix64::new(3));
        head.out.init_zero(&mut store);
        let g = Graph::new();
        let p = Params::frozen(&g, &store);
        let y = head.forward(&p, g.constant(Tensor::full(&[1, 4, 3, 5], 0.7))).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 24, 40]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        assert!(y.sigmoid().value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn seam_counts() {
        // Left half e1, right half e2 on a 6x6 map.
        let t = Tensor::from_fn(&[1, 2, 6, 6], |i| {
            let (c, x) = (i / 36, i % 6);
            f64::from(u8::from((x < 3) == (c == 0)))
        });
        let g = Graph::new();
        let e = patch_similarity(g.constant(t)).unwrap().value();
        assert!((e.at(&[0, 0, 2, 0]) - 1.0).abs() < 1e-12);
        assert!((e.at(&[0, 0, 2, 2]) - 6.0 / 9.0).abs() < 1e-12);
        assert!((e.at(&[0, 0, 2, 3]) - 6.0 / 9.0).abs() < 1e-12);
        // Top border at the seam: clamped window of 6 with 2 across.
        assert!((e.at(&[0, 0, 0, 2]) - 4.0 / 6.0).abs() < 1e-12);
    }
}
