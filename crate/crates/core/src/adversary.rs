//! Spectrally normalized PatchGAN discriminator and least-squares GAN losses.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::nn::Conv2d;
use crate::tensor::{ConvCfg, ParamStore, Params, Tensor, Var};

/// Guard below which a weight is treated as zero.
pub const SIGMA_EPS: f64 = 1e-12;
/// Power iterations run when the state is created.
pub const WARMUP_ITERS: usize = 20;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Left/right singular vector estimates of a weight viewed as `[out, rest]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > SIGMA_EPS {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

fn rows_cols(w: &Tensor) -> (usize, usize) {
    let rows = w.shape()[0];
    (rows, w.len() / rows.max(1))
}

impl SpectralState {
    pub fn new(rows: usize, cols: usize, rng: &mut SplitMix64) -> Self {
        let mut u = rng.fill_normal(rows);
        let mut v = rng.fill_normal(cols);
        normalize(&mut u);
        normalize(&mut v);
        Self { u, v }
    }

    pub fn for_weight(w: &Tensor, rng: &mut SplitMix64) -> Self {
        let (r, c) = rows_cols(w);
        Self::new(r, c, rng)
    }

    /// One power iteration: `v <- Wᵀu / |Wᵀu|`, `u <- Wv / |Wv|`.
    pub fn iterate(&mut self, w: &Tensor) -> Result<()> {
        let (rows, cols) = rows_cols(w);
        if self.u.len() != rows || self.v.len() != cols {
            return Err(Error::contract(format!(
                "spectral state {}x{} does not match weight {rows}x{cols}",
                self.u.len(),
                self.v.len()
            )));
        }
        let d = w.data();
        let mut v = vec![0.0; cols];
        for (r, &ur) in self.u.iter().enumerate() {
            for (vc, &x) in v.iter_mut().zip(&d[r * cols..(r + 1) * cols]) {
                *vc += x * ur;
            }
        }
        if normalize(&mut v) <= SIGMA_EPS {
            return Ok(());
        }
        let mut u: Vec<f64> = (0..rows)
            .map(|r| d[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        if normalize(&mut u) <= SIGMA_EPS {
            return Ok(());
        }
        self.u = u;
        self.v = v;
        Ok(())
    }

    /// `uᵀ W v`.
    pub fn sigma(&self, w: &Tensor) -> f64 {
        let (_, cols) = rows_cols(w);
        let d = w.data();
        self.u
            .iter()
            .enumerate()
            .map(|(r, ur)| ur * d[r * cols..(r + 1) * cols].iter().zip(&self.v).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    /// `u vᵀ` in the weight's shape.
    pub fn outer(&self, shape: &[usize]) -> Tensor {
        let cols = self.v.len();
        Tensor::from_fn(shape, |i| self.u[i / cols] * self.v[i % cols])
    }
}

/// One power-iteration update followed by `W / σ̂`. A (near) zero weight is
/// returned unchanged.
pub fn spectral_normalize(weight: &Tensor, state: &mut SpectralState) -> Result<Tensor> {
    state.iterate(weight)?;
    let sigma = state.sigma(weight);
    if sigma.abs() <= SIGMA_EPS {
        return Ok(weight.clone());
    }
    Ok(weight.map(|v| v / sigma))
}

/// Graph form of `W / σ̂` with `u, v` held fixed, so gradients include the
/// dependence of `σ̂ = sum(W ⊙ u vᵀ)` on `W`.
pub fn spectral_normalize_var<'g>(w: Var<'g>, state: &SpectralState) -> Result<Var<'g>> {
    let value = w.value();
    if state.sigma(&value).abs() <= SIGMA_EPS {
        return Ok(w);
    }
    let uv = w.graph().constant(state.outer(value.shape()));
    let sigma = w.mul(uv)?.sum();
    w.div(sigma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub widths: [usize; 4],
}

impl DiscriminatorConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            widths: [64, 128, 256, 512],
        }
    }

    pub fn toy(in_channels: usize) -> Self {
        Self {
            in_channels,
            widths: [8, 16, 16, 16],
        }
    }
}

/// 70x70 PatchGAN: kernel-4 convs with strides 2, 2, 2, 1 and a stride-1
/// scoring conv, all spectrally normalized.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    layers: Vec<Conv2d>,
    state: Vec<SpectralState>,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig) -> Self {
        let strides = [2, 2, 2, 1, 1];
        let mut cin = cfg.in_channels;
        let mut layers = Vec::new();
        for (i, &s) in strides.iter().enumerate() {
            let cout = cfg.widths.get(i).copied().unwrap_or(1);
            layers.push(Conv2d::new(format!("disc.conv{i}"), cin, cout, 4, ConvCfg::new(s, 1, 1)));
            cin = cout;
        }
        Self {
            cfg,
            layers,
            state: Vec::new(),
        }
    }

    /// Initializes weights and warms up the singular vector estimates.
    pub fn init(&mut self, store: &mut ParamStore, rng: &mut SplitMix64) -> Result<()> {
        self.state.clear();
        for l in &self.layers {
            l.init(store, rng);
            let w = store.require(&l.weight_name())?;
            let mut st = SpectralState::for_weight(w, rng);
            for _ in 0..WARMUP_ITERS {
                st.iterate(w)?;
            }
            self.state.push(st);
        }
        Ok(())
    }

    pub fn state(&self) -> &[SpectralState] {
        &self.state
    }

    pub fn set_state(&mut self, state: Vec<SpectralState>) -> Result<()> {
        if state.len() != self.layers.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} spectral states, got {}",
                self.layers.len(),
                state.len()
            )));
        }
        self.state = state;
        Ok(())
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    /// One power iteration per layer against the current weights.
    pub fn power_step(&mut self, store: &ParamStore) -> Result<()> {
        for (l, st) in self.layers.iter().zip(&mut self.state) {
            st.iterate(store.require(&l.weight_name())?)?;
        }
        Ok(())
    }

    /// Patch score map `[n, 1, h', w']` for `[n, in_channels, h, w]` input.
    pub fn forward<'g>(&self, p: &Params<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        if self.state.len() != self.layers.len() {
            return Err(Error::contract("discriminator used before init"));
        }
        let c = x.shape()[1];
        if c != self.cfg.in_channels {
            return Err(Error::contract(format!("discriminator expects {} channels, got {c}", self.cfg.in_channels)));
        }
        let last = self.layers.len() - 1;
        let mut x = x;
        for (i, (l, st)) in self.layers.iter().zip(&self.state).enumerate() {
            let w = spectral_normalize_var(p.get(&l.weight_name())?, st)?;
            let b = p.get(&l.bias_name())?;
            x = x.conv2d(w, Some(b), l.cfg)?;
            if i != last {
                x = x.leaky_relu(LEAKY_SLOPE);
            }
        }
        Ok(x)
    }
}

/// Generator term: `mean((D(fake) - 1)²)`.
pub fn lsgan_generator_loss<'g>(d_fake: Var<'g>) -> Var<'g> {
    d_fake.add_scalar(-1.0).square().mean()
}

/// Discriminator term. The conventional form targets 0 for fake scores;
/// otherwise both terms target 1.
pub fn lsgan_discriminator_loss<'g>(d_fake: Var<'g>, d_real: Var<'g>, standard: bool) -> Result<Var<'g>> {
    let fake_target = if standard { 0.0 } else { 1.0 };
    let fake = d_fake.add_scalar(-fake_target).square().mean();
    let real = d_real.add_scalar(-1.0).square().mean();
    fake.add(real)
}

/// `(L_G, L_D)`.
pub fn lsgan_losses<'g>(d_fake: Var<'g>, d_real: Var<'g>, standard: bool) -> Result<(Var<'g>, Var<'g>)> {
    Ok((lsgan_generator_loss(d_fake), lsgan_discriminator_loss(d_fake, d_real, standard)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn diagonal_matrix() {
        let w = Tensor::new(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut st = SpectralState::new(2, 2, &mut SplitMix64::new(1));
        let mut out = w.clone();
        for _ in 0..60 {
            out = spectral_normalize(&w, &mut st).unwrap();
        }
        assert!((st.sigma(&w) - 3.0).abs() < 1e-9);
        assert!((out.data()[0] - 1.0).abs() < 1e-9);
        assert!((out.data()[3] - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn identity_and_zero() {
        let eye = Tensor::from_fn(&[3, 3], |i| f64::from(u8::from(i % 4 == 0)));
        let mut st = SpectralState::new(3, 3, &mut SplitMix64::new(2));
        let out = spectral_normalize(&eye, &mut st).unwrap();
        assert!(out.max_abs_diff(&eye) < 1e-12);
        let zero = Tensor::zeros(&[3, 3]);
        assert_eq!(spectral_normalize(&zero, &mut st).unwrap(), zero);
    }

    #[test]
    fn patch_map_size_at_256() {
        let d = Discriminator::new(DiscriminatorConfig::toy(3));
        let sizes = d.layers.iter().fold(256, |s, l| crate::tensor::conv_out_size(s, 4, l.cfg).unwrap());
        assert_eq!(sizes, 30);
    }

    #[test]
    fn forward_shape_and_determinism() {
        let mut d = Discriminator::new(DiscriminatorConfig::toy(4));
        let mut store = ParamStore::new();
        d.init(&mut store, &mut SplitMix64::new(0)).unwrap();
        let g = Graph::new();
        let p = Params::frozen(&g, &store);
        let x = Tensor::from_fn(&[2, 4, 64, 64], |i| ((i * 31) % 17) as f64 / 17.0);
        let a = d.forward(&p, g.constant(x.clone())).unwrap();
        let b = d.forward(&p, g.constant(x)).unwrap();
        assert_eq!(a.shape(), vec![2, 1, 6, 6]);
        assert_eq!(*a.value(), *b.value());
    }

    #[test]
    fn lsgan_closed_forms() {
        let g = Graph::new();
        let ones = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let zeros = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let (lg, _) = lsgan_losses(ones, ones, true).unwrap();
        assert_eq!(lg.value().item(), 0.0);
        let (_, ld) = lsgan_losses(zeros, ones, false).unwrap();
        assert_eq!(ld.value().item(), 1.0);
        let (_, ld) = lsgan_losses(zeros, ones, true).unwrap();
        assert_eq!(ld.value().item(), 0.0);
        let big = g.constant(Tensor::zeros(&[1, 1, 6, 6]));
        assert_eq!(lsgan_generator_loss(big).value().item(), lsgan_generator_loss(zeros).value().item());
    }
}
