//! Finite-difference checks of every differentiable block at toy shapes.

use crate::adversary::{lsgan_discriminator_loss, lsgan_generator_loss, Discriminator, DiscriminatorConfig};
use crate::error::Result;
use crate::inpaint::{LongShortAttention, ResBlock, Tdrb, REGION_EPS};
use crate::losses::{perceptual_loss, reconstruction_loss, style_loss, tv_loss, FeatureExtractor};
use crate::maskdetect::{detection_loss, edge_fuse, EncoderLayer, FrequencyAttention, PatchSequence};
use crate::rng::SplitMix64;
use crate::tensor::gradcheck::{check, project, GradCheckOpts, GradReport};
use crate::tensor::nn::{Conv2d, Deconv2d};
use crate::tensor::{ConvCfg, Graph, ParamStore, Params, Tensor, Var};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

struct Ctx {
    seed: u64,
    opts: GradCheckOpts,
}

impl Ctx {
    fn rng(&self, salt: u64) -> SplitMix64 {
        SplitMix64::for_index(self.seed, salt)
    }

    fn rand(&self, salt: u64, shape: &[usize]) -> Tensor {
        let mut r = self.rng(salt);
        Tensor::from_fn(shape, |_| r.uniform(-1.0, 1.0))
    }

    fn unit(&self, salt: u64, shape: &[usize]) -> Tensor {
        let mut r = self.rng(salt);
        Tensor::from_fn(shape, |_| r.uniform(0.05, 0.95))
    }

    /// Random `[n, 1, h, w]` binary mask with at least two sites in each region.
    fn mask(&self, salt: u64, shape: &[usize]) -> Tensor {
        let mut r = self.rng(salt);
        let plane = shape[2] * shape[3];
        Tensor::from_fn(shape, |i| match i % plane {
            0 | 1 => 1.0,
            2 | 3 => 0.0,
            _ => (r.next_f64() < 0.5) as u8 as f64,
        })
    }

    /// Checks `f` against `inputs` plus the named parameters of `store`.
    fn block<F>(&self, name: &str, store: &ParamStore, bound: &[String], inputs: Vec<Tensor>, f: F) -> Result<GradReport>
    where
        F: for<'g> Fn(&Params<'g, '_>, &[Var<'g>]) -> Result<Var<'g>>,
    {
        let k = inputs.len();
        let mut all = inputs;
        for b in bound {
            all.push(store.require(b)?.clone());
        }
        let salt = self.seed ^ name.len() as u64;
        check(name, &all, self.opts, |g, v| {
            let p = Params::frozen(g, store);
            for (b, var) in bound.iter().zip(&v[k..]) {
                p.bind(b, *var);
            }
            project(f(&p, &v[..k])?, salt)
        })
    }

    fn plain<F>(&self, name: &str, inputs: Vec<Tensor>, f: F) -> Result<GradReport>
    where
        F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
    {
        check(name, &inputs, self.opts, f)
    }
}

fn names(convs: &[&Conv2d]) -> Vec<String> {
    convs.iter().flat_map(|c| [c.weight_name(), c.bias_name()]).collect()
}

/// Runs every block check. The seed drives inputs, weights and sampled coordinates.
pub fn run(seed: u64) -> Result<Vec<GradReport>> {
    let cx = Ctx {
        seed,
        opts: GradCheckOpts {
            seed,
            ..GradCheckOpts::default()
        },
    };
    let mut out = Vec::new();

    out.push(cx.plain(
        "conv2d",
        vec![cx.rand(1, &[2, 2, 5, 5]), cx.rand(2, &[3, 2, 3, 3]), cx.rand(3, &[3])],
        |_, v| project(v[0].conv2d(v[1], Some(v[2]), ConvCfg::new(2, 1, 1))?, 11),
    )?);
    out.push(cx.plain(
        "conv2d_dilated",
        vec![cx.rand(4, &[1, 2, 6, 6]), cx.rand(5, &[2, 2, 3, 3])],
        |_, v| project(v[0].conv2d(v[1], None, ConvCfg::new(1, 2, 2))?, 12),
    )?);
    out.push(cx.plain(
        "deconv2d",
        vec![cx.rand(6, &[2, 2, 3, 3]), cx.rand(7, &[2, 3, 4, 4]), cx.rand(8, &[3])],
        |_, v| project(v[0].deconv2d(v[1], Some(v[2]), ConvCfg::new(2, 1, 1))?, 13),
    )?);

    // Encoder layer with frequency maps; every projection is randomized so
    // no residual branch is closed.
    {
        let layer = EncoderLayer::new("enc", 4, 2, 2, 2);
        let mut store = ParamStore::new();
        let mut r = cx.rng(20);
        layer.init(&mut store, &mut r);
        for c in [&layer.fuse, &layer.mlp_out] {
            c.init(&mut store, &mut r);
        }
        let bound = names(&[&layer.q, &layer.k, &layer.v, &layer.fuse, &layer.mlp_in, &layer.mlp_out]);
        out.push(cx.block(
            "attention_layer",
            &store,
            &bound,
            vec![cx.rand(21, &[4, 4, 2, 2]), cx.rand(22, &[1, 2, 4, 4])],
            |p, v| {
                let seq = PatchSequence {
                    tokens: v[0],
                    batch: 1,
                    grid: 2,
                    patch_h: 2,
                    patch_w: 2,
                    channels: 4,
                };
                let (next, attn) = layer.forward(p, seq, Some(v[1]))?;
                project(next.tokens, 1)?.add(project(attn.dual, 2)?)
            },
        )?);
    }
    {
        let fa = FrequencyAttention::new("freq", 4, 2, 3, 2, 4);
        let mut store = ParamStore::new();
        fa.init(&mut store, &mut cx.rng(23));
        let bound: Vec<String> = store.names().cloned().collect();
        out.push(cx.block("frequency_attention", &store, &bound, vec![cx.rand(24, &[1, 1, 8, 8])], |p, v| {
            fa.forward(p, v[0])
        })?);
    }
    out.push(cx.plain("patch_similarity", vec![cx.rand(25, &[2, 3, 4, 4])], |_, v| {
        let (fused, edge) = edge_fuse(v[0])?;
        project(fused, 3)?.add(project(edge, 4)?)
    })?);

    {
        let t = Tdrb::upsampling("tdrb", 3, 2);
        let mut store = ParamStore::new();
        t.init(&mut store, &mut cx.rng(30));
        store.insert("tdrb.norm.gamma", cx.unit(31, &[1, 2, 1, 1]));
        store.insert("tdrb.norm.beta", cx.rand(32, &[1, 2, 1, 1]));
        let mut bound = names(&[&t.mix, &t.refine]);
        bound.extend([t.up.weight_name(), t.up.bias_name(), "tdrb.norm.gamma".into(), "tdrb.norm.beta".into()]);
        let m = cx.mask(33, &[1, 1, 4, 4]);
        out.push(cx.block(
            "tdrb",
            &store,
            &bound,
            vec![cx.rand(34, &[1, 3, 2, 2]), cx.rand(35, &[1, 2, 4, 4])],
            |p, v| t.forward(p, v[0], v[1], &m),
        )?);
    }
    {
        let m = cx.mask(40, &[2, 1, 4, 4]);
        out.push(cx.plain("region_norm", vec![cx.rand(41, &[2, 3, 4, 4])], |_, v| {
            project(v[0].region_norm(&m, REGION_EPS)?, 5)
        })?);
    }
    {
        let rb = ResBlock::new("res", 2, 2);
        let mut store = ParamStore::new();
        rb.init(&mut store, &mut cx.rng(42));
        let bound: Vec<String> = store.names().cloned().collect();
        out.push(cx.block("res_block", &store, &bound, vec![cx.rand(43, &[1, 2, 5, 5])], |p, v| rb.forward(p, v[0]))?);
    }
    {
        let ls = LongShortAttention::new("lsa", 2, 2);
        let mut store = ParamStore::new();
        let mut r = cx.rng(44);
        ls.init(&mut store, &mut r);
        ls.long.init(&mut store, &mut r);
        ls.short.init(&mut store, &mut r);
        let bound: Vec<String> = store.names().cloned().collect();
        out.push(cx.block(
            "long_short_attention",
            &store,
            &bound,
            vec![cx.rand(45, &[1, 2, 3, 3]), cx.rand(46, &[1, 2, 3, 3])],
            |p, v| ls.forward(p, v[0], v[1]),
        )?);
    }

    // Losses.
    let fx = FeatureExtractor::with_channels(seed, [3, 4, 4, 4, 4]);
    let img = [1, 3, 16, 16];
    let m = cx.mask(50, &[1, 1, 16, 16]);
    let gt = cx.unit(51, &img);
    out.push(cx.plain("recons_loss", vec![cx.unit(52, &img)], |g, v| {
        reconstruction_loss(v[0], g.constant(gt.clone()), &m)
    })?);
    out.push(cx.plain("adv_loss", vec![cx.rand(53, &[2, 1, 3, 3]), cx.rand(54, &[2, 1, 3, 3])], |_, v| {
        lsgan_generator_loss(v[0]).add(lsgan_discriminator_loss(v[0], v[1], true)?)
    })?);
    out.push(cx.plain("perceptual_loss", vec![cx.unit(55, &img)], |g, v| {
        perceptual_loss(v[0], g.constant(gt.clone()), &fx)
    })?);
    out.push(cx.plain("style_loss", vec![cx.unit(56, &img)], |g, v| {
        style_loss(v[0], g.constant(gt.clone()), &m, &fx)
    })?);
    out.push(cx.plain("tv_loss", vec![cx.unit(57, &img)], |_, v| tv_loss(v[0]))?);
    {
        let target = cx.mask(58, &[1, 1, 8, 8]);
        out.push(cx.plain("detection_loss", vec![cx.rand(59, &[1, 1, 8, 8])], |_, v| {
            detection_loss(v[0].sigmoid(), &target)
        })?);
    }

    {
        let mut d = Discriminator::new(DiscriminatorConfig {
            in_channels: 3,
            widths: [4, 4, 4, 4],
        });
        let mut store = ParamStore::new();
        d.init(&mut store, &mut cx.rng(60))?;
        let bound = ["disc.conv0.weight", "disc.conv2.weight", "disc.conv4.weight", "disc.conv4.bias"].map(String::from);
        out.push(cx.block("discriminator", &store, &bound, vec![cx.rand(61, &[1, 3, 32, 32])], |p, v| {
            d.forward(p, v[0])
        })?);
    }
    {
        let up = Deconv2d::upsample2("up", 2, 2);
        let mut store = ParamStore::new();
        up.init(&mut store, &mut cx.rng(62));
        let bound = [up.weight_name(), up.bias_name()];
        out.push(cx.block("deconv_layer", &store, &bound, vec![cx.rand(63, &[1, 2, 3, 3])], |p, v| {
            up.forward(p, v[0])
        })?);
    }
    Ok(out)
}

/// One line per block: name, maximum relative error, coordinates, verdict.
pub fn format_report(reports: &[GradReport]) -> String {
    let mut s = String::from("block\tmax_rel_err\tcoords\tstatus\n");
    for r in reports {
        let status = if r.passes(TOLERANCE) { "ok" } else { "FAIL" };
        s.push_str(&format!("{}\t{:.3e}\t{}\t{}\n", r.name, r.max_rel_err, r.coords, status));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_lists_every_block() {
        let reports = run(1).unwrap();
        let text = format_report(&reports);
        for name in ["conv2d", "deconv2d", "attention_layer", "tdrb", "region_norm", "style_loss", "discriminator"] {
            assert!(text.lines().any(|l| l.starts_with(&format!("{name}\t"))), "{name}");
        }
    }
}
