//! Parameterized layers. A layer only knows its parameter names and shapes;
//! the weights themselves live in a [`ParamStore`].

use super::{ConvCfg, ParamStore, Params, Tensor, Var};
use crate::error::Result;
use crate::rng::SplitMix64;

/// Kaiming-uniform (fan-in) bound `sqrt(6 / fan_in)`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut SplitMix64) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform(-bound, bound))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub cfg: ConvCfg,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, cfg: ConvCfg) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            cfg,
        }
    }

    /// 1x1 convolution.
    pub fn pointwise(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 1, ConvCfg::unit())
    }

    /// Odd-kernel convolution that keeps the spatial size.
    pub fn same(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, dilation: usize) -> Self {
        Self::new(name, cin, cout, kernel, ConvCfg::same(kernel, dilation))
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.kernel, self.kernel]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        let fan_in = self.cin * self.kernel * self.kernel;
        store.insert(self.weight_name(), kaiming_uniform(&self.weight_shape(), fan_in, rng));
        store.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
    }

    pub fn init_zero(&self, store: &mut ParamStore) {
        store.insert(self.weight_name(), Tensor::zeros(&self.weight_shape()));
        store.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
    }

    pub fn forward<'g>(&self, p: &Params<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        x.conv2d(w, Some(b), self.cfg)
    }
}

/// Transposed convolution; weights are `[cin, cout, k, k]`.
#[derive(Debug, Clone)]
pub struct Deconv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub cfg: ConvCfg,
}

impl Deconv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, cfg: ConvCfg) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            cfg,
        }
    }

    /// Kernel 4, stride 2, padding 1: exactly doubles height and width.
    pub fn upsample2(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 4, ConvCfg::new(2, 1, 1))
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        let s = self.cfg.stride;
        let fan_in = (self.cin * self.kernel * self.kernel / (s * s)).max(1);
        let shape = [self.cin, self.cout, self.kernel, self.kernel];
        store.insert(self.weight_name(), kaiming_uniform(&shape, fan_in, rng));
        store.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
    }

    pub fn forward<'g>(&self, p: &Params<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        x.deconv2d(w, Some(b), self.cfg)
    }
}
