//! Numpy-style broadcasting for elementwise binary operations.

use super::{strides, Tensor};
use crate::error::{Axis, Error, Result};

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for (i, o) in out.iter_mut().enumerate() {
        let da = dim_from_right(a, rank, i);
        let db = dim_from_right(b, rank, i);
        *o = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => {
                return Err(Error::dim(
                    op,
                    Axis::Index(i),
                    format!("cannot broadcast {a:?} with {b:?} ({x} vs {y})"),
                ))
            }
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], rank: usize, i: usize) -> usize {
    let pad = rank - shape.len();
    if i < pad {
        1
    } else {
        shape[i - pad]
    }
}

/// Strides of `shape` viewed inside `out`, with 0 on broadcast axes.
fn view_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let own = strides(shape);
    let pad = rank - shape.len();
    (0..rank)
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Visits every output position with the matching flat offsets into `a` and `b`.
fn walk(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let rows: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut o = 0;
    for _ in 0..rows {
        let base_a: usize = idx.iter().zip(sa).map(|(i, s)| i * s).sum();
        let base_b: usize = idx.iter().zip(sb).map(|(i, s)| i * s).sum();
        for j in 0..last {
            f(o, base_a + j * la, base_b + j * lb);
            o += 1;
        }
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = view_strides(a.shape(), &out);
    let sb = view_strides(b.shape(), &out);
    let n: usize = out.iter().product();
    let mut data = vec![0.0; n];
    let (ad, bd) = (a.data(), b.data());
    walk(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Ok(Tensor::from_parts(out, data))
}

/// Gradients of a broadcast binary op: `ga[ia] += da(a, b, g)`, `gb[ib] += db(a, b, g)`.
pub(crate) fn binary_backward(
    a: &Tensor,
    b: &Tensor,
    g: &[f64],
    want_a: bool,
    want_b: bool,
    da: impl Fn(f64, f64, f64) -> f64,
    db: impl Fn(f64, f64, f64) -> f64,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut ga = want_a.then(|| vec![0.0; a.len()]);
    let mut gb = want_b.then(|| vec![0.0; b.len()]);
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        for i in 0..g.len() {
            if let Some(ga) = ga.as_mut() {
                ga[i] += da(ad[i], bd[i], g[i]);
            }
            if let Some(gb) = gb.as_mut() {
                gb[i] += db(ad[i], bd[i], g[i]);
            }
        }
        return (ga, gb);
    }
    let out = broadcast_shape("backward", a.shape(), b.shape()).expect("shapes checked in forward");
    let sa = view_strides(a.shape(), &out);
    let sb = view_strides(b.shape(), &out);
    walk(&out, &sa, &sb, |o, ia, ib| {
        if let Some(ga) = ga.as_mut() {
            ga[ia] += da(ad[ia], bd[ib], g[o]);
        }
        if let Some(gb) = gb.as_mut() {
            gb[ib] += db(ad[ia], bd[ib], g[o]);
        }
    });
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[1, 4, 1, 5], &[4, 3, 1]).unwrap(), vec![1, 4, 3, 5]);
        assert!(broadcast_shape("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn channel_broadcast_matches_loop() {
        let a = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let b = Tensor::from_fn(&[3, 1], |i| 10.0 * i as f64);
        let c = binary("add", &a, &b, |x, y| x + y).unwrap();
        for n in 0..2 {
            for ch in 0..3 {
                for j in 0..4 {
                    assert_eq!(c.at(&[n, ch, j]), a.at(&[n, ch, j]) + b.at(&[ch, 0]));
                }
            }
        }
        let g = vec![1.0; 24];
        let (_, gb) = binary_backward(&a, &b, &g, false, true, |_, _, g| g, |_, _, g| g);
        assert_eq!(gb.unwrap(), vec![8.0, 8.0, 8.0]);
    }
}
