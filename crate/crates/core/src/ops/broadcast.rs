use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Output shape of a size-1-expansion broadcast between equal-rank shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

/// For every flat index of `out`, the flat offset of the element of a tensor
/// of shape `src` that broadcasts onto it.
pub(crate) fn broadcast_offsets(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { s };
        s *= src[d];
    }
    let total: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    offsets
}

pub(crate) fn binary<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let oa = broadcast_offsets(&shape, a.shape());
    let ob = broadcast_offsets(&shape, b.shape());
    let (ad, bd) = (a.data(), b.data());
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(ad[i], bd[j])).collect();
    Tensor::new(shape, data)
}

/// Sums `grad` over the dimensions along which `shape` was expanded.
pub(crate) fn reduce_to<T: Real>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let offsets = broadcast_offsets(grad.shape(), shape);
    let mut out = Tensor::zeros(shape.to_vec());
    let od = out.data_mut();
    for (&o, &g) in offsets.iter().zip(grad.data()) {
        od[o] = od[o] + g;
    }
    out
}

/// `other` expanded to `shape` (which it must broadcast onto).
pub(crate) fn expand<T: Real>(other: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if other.shape() == shape {
        return other.clone();
    }
    let offsets = broadcast_offsets(shape, other.shape());
    let od = other.data();
    Tensor::new(shape.to_vec(), offsets.iter().map(|&o| od[o]).collect())
        .expect("expand keeps element count")
}
