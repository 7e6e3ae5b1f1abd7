//! Central finite-difference verification of backward passes.

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOpts {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates sampled per input tensor (all of them if the tensor is smaller).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error of one coordinate. The denominator is floored at a small
/// fraction of the largest analytic entry over all inputs, so coordinates
/// with an exactly zero gradient (a bias in front of a softmax or a
/// normalization) are judged on the block's scale rather than on noise.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3 * scale).max(1e-10);
    (analytic - numeric).abs() / denom
}

/// Compares the gradient of `f` with respect to every input against central
/// differences. `f` must return a scalar.
pub fn check<F>(name: &str, inputs: &[Tensor], opts: GradCheckOpts, f: F) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.value().item())
    };

    let mut rng = SplitMix64::new(opts.seed);
    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let scale = analytic
        .iter()
        .flat_map(|a| a.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let picks: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            (0..opts.max_coords).map(|_| rng.below(n as u64) as usize).collect()
        };
        for i in picks {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric, scale));
            coords += 1;
        }
    }
    Ok(GradReport {
        name: name.to_string(),
        max_rel_err: worst,
        coords,
    })
}

/// Reduces any output to a scalar through a fixed random projection, so a
/// gradient check exercises every output coordinate.
pub fn project<'g>(v: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let shape = v.shape();
    let mut rng = SplitMix64::new(seed ^ 0x5EED);
    let r = Tensor::from_fn(&shape, |_| rng.uniform(-1.0, 1.0));
    v.mul(v.graph().constant(r)).map(|p| p.sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvCfg;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut r = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| r.uniform(-1.0, 1.0))
    }

    #[test]
    fn elementwise_ops_pass() {
        let a = rand(&[3, 4], 1);
        let b = Tensor::from_fn(&[4], |i| 0.5 + i as f64 * 0.3);
        let rep = check("elementwise", &[a, b], GradCheckOpts::default(), |_, v| {
            let s = v[0].mul(v[1])?.sigmoid();
            let t = v[0].div(v[1])?.tanh();
            let u = v[0].sub(v[1])?.square().add_scalar(1.0).log();
            project(s.add(t)?.add(u)?, 3)
        })
        .unwrap();
        assert!(rep.passes(1e-6), "{rep:?}");
    }

    #[test]
    fn conv_weight_gradient_passes() {
        let x = rand(&[2, 2, 5, 5], 2);
        let w = rand(&[3, 2, 3, 3], 3);
        let b = rand(&[3], 4);
        let rep = check("conv", &[x, w, b], GradCheckOpts::default(), |_, v| {
            Ok(v[0].conv2d(v[1], Some(v[2]), ConvCfg::new(1, 1, 1))?.sum())
        })
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // abs has a kink at 0: evaluating exactly there disagrees with FD.
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let rep = check("kink", &[x], GradCheckOpts::default(), |_, v| Ok(v[0].add_scalar(1e-7).abs().sum())).unwrap();
        assert!(!rep.passes(1e-4));
    }
}
