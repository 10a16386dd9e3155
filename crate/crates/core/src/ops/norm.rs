//! Batch normalization over `(N, H, W)` per channel.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub(crate) struct BnTrainOut<T> {
    pub y: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Unbiased batch variance, used for the running estimate.
    pub var_unbiased: Vec<T>,
}

fn check_affine<T: Real>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                lhs: vec![c],
                rhs: p.shape().to_vec(),
            });
        }
    }
    Ok(())
}

pub(crate) fn train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<BnTrainOut<T>> {
    let (n, c, h, w) = x.dims4()?;
    check_affine(c, gamma, beta)?;
    let hw = h * w;
    let count = n * hw;
    if count < 2 {
        return Err(Error::invalid(format!(
            "batchnorm in train mode needs at least 2 values per channel, got {count}"
        )));
    }
    let xd = x.data();
    let m = T::c(count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s = s + xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum();
        }
        let mu = s / m;
        let mut q = T::zero();
        for b in 0..n {
            for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                q = q + (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = q;
    }
    let inv_std: Vec<T> = var.iter().map(|&q| T::one() / (q / m + T::c(eps)).sqrt()).collect();
    let var_unbiased = var.iter().map(|&q| q / T::c((count - 1) as f64)).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    let (gd, bd) = (gamma.data(), beta.data());
    for (i, (&v, (xh, yv))) in xd.iter().zip(xhat.iter_mut().zip(y.iter_mut())).enumerate() {
        let ch = (i / hw) % c;
        *xh = (v - mean[ch]) * inv_std[ch];
        *yv = gd[ch] * *xh + bd[ch];
    }
    Ok(BnTrainOut {
        y: Tensor::new(x.shape().to_vec(), y)?,
        xhat,
        inv_std,
        mean,
        var_unbiased,
    })
}

/// Gradients `(dx, dgamma, dbeta)` through batch statistics.
pub(crate) fn train_backward<T: Real>(
    shape: &[usize],
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = T::c((n * hw) as f64);
    let gd = g.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, (&gv, &xh)) in gd.iter().zip(xhat).enumerate() {
        let ch = (i / hw) % c;
        dbeta[ch] = dbeta[ch] + gv;
        dgamma[ch] = dgamma[ch] + gv * xh;
    }
    let dx: Vec<T> = gd
        .iter()
        .zip(xhat)
        .enumerate()
        .map(|(i, (&gv, &xh))| {
            let ch = (i / hw) % c;
            gamma.data()[ch] * inv_std[ch] / m * (m * gv - dbeta[ch] - xh * dgamma[ch])
        })
        .collect();
    (
        Tensor::new(shape.to_vec(), dx).expect("shape"),
        Tensor::new([c], dgamma).expect("shape"),
        Tensor::new([c], dbeta).expect("shape"),
    )
}

/// Inference-mode normalization with fixed statistics; returns the output
/// and the per-channel `1/sqrt(var + eps)`.
pub(crate) fn eval<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (_, c, h, w) = x.dims4()?;
    check_affine(c, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::invalid("batchnorm running statistics do not match channels"));
    }
    let hw = h * w;
    let inv_std: Vec<T> = running_var
        .iter()
        .map(|&v| T::one() / (v + T::c(eps)).sqrt())
        .collect();
    let (gd, bd) = (gamma.data(), beta.data());
    let y = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / hw) % c;
            gd[ch] * (v - running_mean[ch]) * inv_std[ch] + bd[ch]
        })
        .collect();
    Ok((Tensor::new(x.shape().to_vec(), y)?, inv_std))
}
