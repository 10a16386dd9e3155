use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Softmax over dimension 1 of an `[N, K, H, W]` tensor, max-subtracted per
/// position.
pub(crate) fn softmax_channel<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k, h, w) = x.dims4()?;
    if k < 2 {
        return Err(Error::invalid(format!(
            "softmax_channel needs at least 2 channels, got {k}"
        )));
    }
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        let base = b * k * hw;
        for p in 0..hw {
            let mut max = T::neg_infinity();
            for c in 0..k {
                max = max.max(xd[base + c * hw + p]);
            }
            let mut total = T::zero();
            for c in 0..k {
                let e = (xd[base + c * hw + p] - max).exp();
                out[base + c * hw + p] = e;
                total = total + e;
            }
            for c in 0..k {
                out[base + c * hw + p] = out[base + c * hw + p] / total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_channel_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (n, k, h, w) = y.dims4().expect("softmax output is rank 4");
    let hw = h * w;
    let (yd, gd) = (y.data(), g.data());
    let mut dx = vec![T::zero(); yd.len()];
    for b in 0..n {
        let base = b * k * hw;
        for p in 0..hw {
            let dot: T = (0..k)
                .map(|c| yd[base + c * hw + p] * gd[base + c * hw + p])
                .sum();
            for c in 0..k {
                let i = base + c * hw + p;
                dx[i] = yd[i] * (gd[i] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("same shape")
}
