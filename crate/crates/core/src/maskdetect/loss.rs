use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Probability clamp used inside the cross-entropy logs.
pub const BCE_CLAMP: f64 = 1e-6;
pub const DICE_EPS: f64 = 1e-6;

/// Mean binary cross-entropy plus the per-image dice loss, averaged over the batch.
/// `prob` and `gt` are `[n, 1, h, w]`.
pub fn detection_loss<'g>(prob: Var<'g>, gt: &Tensor) -> Result<Var<'g>> {
    let shape = prob.shape();
    if shape != gt.shape() {
        return Err(Error::contract(format!("detection_loss: {:?} vs {:?}", shape, gt.shape())));
    }
    if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract("detection_loss: ground truth must be binary"));
    }
    let g = prob.graph().constant(gt.clone());
    let p = prob.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let pos = g.mul(p.log())?;
    let neg = g.rsub_scalar(1.0).mul(p.rsub_scalar(1.0).log())?;
    let bce = pos.add(neg)?.mean().neg();

    let n = shape[0];
    let per = |v: Var<'g>| v.reshape(&[n, v.value().len() / n])?.sum_axis(1);
    let inter = per(prob.mul(g)?)?;
    let denom = per(prob)?.add(per(g)?)?.add_scalar(DICE_EPS);
    let dice = inter.scale(2.0).div(denom)?.rsub_scalar(1.0).mean();
    bce.add(dice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn half(n: usize) -> Tensor {
        Tensor::from_fn(&[1, 1, n, n], |i| f64::from(u8::from(i % n < n / 2)))
    }

    #[test]
    fn perfect_prediction() {
        let g = Graph::new();
        let gt = half(8);
        let p = g.constant(gt.map(|v| v.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)));
        let l = detection_loss(p, &gt).unwrap().value().item();
        assert!(l < 1e-4 + 1e-5, "{l}");
    }

    #[test]
    fn dice_half_overlap() {
        let g = Graph::new();
        let gt = half(8);
        let p = g.constant(Tensor::full(&[1, 1, 8, 8], 0.5));
        let l = detection_loss(p, &gt).unwrap().value().item();
        let bce = 2f64.ln();
        assert!((l - bce - 0.5).abs() < 1e-6, "{l}");
    }

    #[test]
    fn rejects_soft_targets() {
        let g = Graph::new();
        let p = g.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
        assert!(detection_loss(p, &Tensor::full(&[1, 1, 2, 2], 0.3)).is_err());
    }
}
