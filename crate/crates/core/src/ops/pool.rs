use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Reduction over `H x W` per channel. For max pooling the returned indices
/// are the flat input offsets of the first maximum in row-major order.
pub(crate) fn spatial<T: Real>(x: &Tensor<T>, mode: PoolMode) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::invalid("pool_spatial: empty spatial extent"));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c);
    let mut argmax = Vec::new();
    for plane in 0..n * c {
        let s = &xd[plane * hw..(plane + 1) * hw];
        match mode {
            PoolMode::Avg => out.push(s.iter().copied().sum::<T>() / T::c(hw as f64)),
            PoolMode::Max => {
                let mut best = 0;
                for (i, &v) in s.iter().enumerate() {
                    if v > s[best] {
                        best = i;
                    }
                }
                out.push(s[best]);
                argmax.push(plane * hw + best);
            }
        }
    }
    Ok((Tensor::new([n, c, 1, 1], out)?, argmax))
}

pub(crate) fn spatial_backward<T: Real>(
    shape: &[usize],
    mode: PoolMode,
    argmax: &[usize],
    g: &Tensor<T>,
) -> Tensor<T> {
    let hw = shape[2] * shape[3];
    let mut dx = Tensor::zeros(shape.to_vec());
    let d = dx.data_mut();
    match mode {
        PoolMode::Avg => {
            let inv = T::one() / T::c(hw as f64);
            for (plane, &gv) in g.data().iter().enumerate() {
                d[plane * hw..(plane + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v = gv * inv);
            }
        }
        PoolMode::Max => {
            for (&i, &gv) in argmax.iter().zip(g.data()) {
                d[i] = d[i] + gv;
            }
        }
    }
    dx
}

/// Reduction over channels at every position, giving `[N, 1, H, W]`.
pub(crate) fn channel<T: Real>(x: &Tensor<T>, mode: PoolMode) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if c == 0 {
        return Err(Error::invalid("pool_channel: no channels"));
    }
    let hw = h * w;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * hw);
    let mut argmax = Vec::new();
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            match mode {
                PoolMode::Avg => {
                    let s: T = (0..c).map(|k| xd[base + k * hw + p]).sum();
                    out.push(s / T::c(c as f64));
                }
                PoolMode::Max => {
                    let mut best = base + p;
                    for k in 1..c {
                        let i = base + k * hw + p;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((Tensor::new([n, 1, h, w], out)?, argmax))
}

pub(crate) fn channel_backward<T: Real>(
    shape: &[usize],
    mode: PoolMode,
    argmax: &[usize],
    g: &Tensor<T>,
) -> Tensor<T> {
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let mut dx = Tensor::zeros(shape.to_vec());
    let d = dx.data_mut();
    match mode {
        PoolMode::Avg => {
            let inv = T::one() / T::c(c as f64);
            for (i, &gv) in g.data().iter().enumerate() {
                let (b, p) = (i / hw, i % hw);
                for k in 0..c {
                    d[b * c * hw + k * hw + p] = gv * inv;
                }
            }
        }
        PoolMode::Max => {
            for (&i, &gv) in argmax.iter().zip(g.data()) {
                d[i] = d[i] + gv;
            }
        }
    }
    dx
}
