//! Data-movement kernels: permute, concat, narrow.

use super::{split_axis, strides, Tensor};
use crate::error::{Axis, Error, Result};

pub(crate) fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(Error::dim("permute", Axis::Rank, format!("permutation {perm:?} for rank {rank}")));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::dim("permute", Axis::Index(p), format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        return x.reshape(&out_shape).expect("same extent");
    }
    let in_strides = strides(x.shape());
    // Output axes that are adjacent in the input collapse into one.
    let mut shape: Vec<usize> = Vec::with_capacity(perm.len());
    let mut src_strides: Vec<usize> = Vec::with_capacity(perm.len());
    for (i, &p) in perm.iter().enumerate() {
        if i > 0 && perm[i - 1] + 1 == p {
            let last = shape.len() - 1;
            shape[last] *= x.shape()[p];
            src_strides[last] = in_strides[p];
        } else {
            shape.push(x.shape()[p]);
            src_strides.push(in_strides[p]);
        }
    }
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let last = shape[rank - 1];
    let last_stride = src_strides[rank - 1];
    let xd = x.data();
    for _ in 0..n / last {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        if last_stride == 1 {
            out.extend_from_slice(&xd[base..base + last]);
        } else {
            out.extend((0..last).map(|j| xd[base + j * last_stride]));
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::dim("concat", Axis::Index(axis), format!("axis out of range for rank {rank}")));
    }
    for p in parts {
        if p.rank() != rank {
            return Err(Error::dim("concat", Axis::Rank, format!("{:?} vs {:?}", first.shape(), p.shape())));
        }
        for d in 0..rank {
            if d != axis && p.shape()[d] != first.shape()[d] {
                return Err(Error::dim("concat", Axis::Index(d), format!("{:?} vs {:?}", first.shape(), p.shape())));
            }
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::dim("narrow", Axis::Index(axis), format!("axis out of range for rank {}", x.rank())));
    }
    if len == 0 || start + len > x.shape()[axis] {
        return Err(Error::dim(
            "narrow",
            Axis::Index(axis),
            format!("range {start}..{} exceeds extent {}", start + len, x.shape()[axis]),
        ));
    }
    let (outer, dim, inner) = split_axis(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let off = (o * dim + start) * inner;
        out.extend_from_slice(&x.data()[off..off + len * inner]);
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn narrow_backward(in_shape: &[usize], axis: usize, start: usize, len: usize, g: &[f64]) -> Vec<f64> {
    let (outer, dim, inner) = split_axis(in_shape, axis);
    let mut gx = vec![0.0; outer * dim * inner];
    for o in 0..outer {
        let dst = (o * dim + start) * inner;
        let src = o * len * inner;
        gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_round_trip_is_exact() {
        let x = Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64 * 0.1);
        let perm = [2, 0, 3, 1];
        let y = permute(&x, &perm);
        assert_eq!(y.shape(), &[4, 2, 5, 3]);
        assert_eq!(y.at(&[3, 1, 4, 2]), x.at(&[1, 2, 3, 4]));
        let back = permute(&y, &inverse_perm(&perm));
        assert_eq!(back, x);
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let a = Tensor::from_fn(&[2, 2, 3], |i| i as f64);
        let b = Tensor::from_fn(&[2, 1, 3], |i| 100.0 + i as f64);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(narrow(&c, 1, 0, 2).unwrap(), a);
        assert_eq!(narrow(&c, 1, 2, 1).unwrap(), b);
        assert!(concat(&[&a, &b], 3).is_err());
    }
}
