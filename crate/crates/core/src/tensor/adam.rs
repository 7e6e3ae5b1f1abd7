use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::{Axis, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Learning rate with the betas used throughout training (0, 0.9).
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment estimates live in a [`ParamStore`]
/// under `m.<name>` / `v.<name>` so they checkpoint like any weight.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    pub state: ParamStore,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            state: ParamStore::new(),
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "adam_step",
                    Axis::Named("param"),
                    format!("`{name}` is {:?}, gradient is {:?}", p.shape(), g.shape()),
                ));
            }
            let mk = format!("m.{name}");
            let vk = format!("v.{name}");
            if !self.state.contains(&mk) {
                self.state.insert(mk.clone(), Tensor::zeros(g.shape()));
                self.state.insert(vk.clone(), Tensor::zeros(g.shape()));
            }
            let mut m = self.state.get(&mk).cloned().expect("inserted");
            let mut v = self.state.get(&vk).cloned().expect("inserted");
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= lr * mh / (vh.sqrt() + eps);
            }
            self.state.insert(mk, m);
            self.state.insert(vk, v);
        }
        Ok(())
    }
}
