//! 2-D cross-correlation via im2col and a blocked matrix product.
//!
//! Work is split over the batch dimension; reductions across the batch
//! (weight and bias gradients) are summed in sample order afterwards so the
//! result does not depend on the number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[_, c, h, w], &[o, wc, kh, kw]) = (x, weight) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: weight.to_vec(),
            });
        };
        if c != wc || stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: weight.to_vec(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d kernel must have odd extents, got {kh}x{kw}"
            )));
        }
        Ok(ConvGeom {
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Fills `cols` (`patch x positions`) from one sample `x` (`C x H x W`).
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.positions();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * self.ow + ox] = if iy < 0
                                || ix < 0
                                || iy >= self.h as isize
                                || ix >= self.w as isize
                            {
                                T::zero()
                            } else {
                                x[(c * self.h + iy as usize) * self.w + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatters `cols` back onto one sample gradient `dx`, accumulating.
    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.positions();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let i = (c * self.h + iy as usize) * self.w + ix as usize;
                            dx[i] = dx[i] + src[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let geom = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [geom.o] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: weight.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let n = x.shape()[0];
    let (in_len, out_len) = (geom.c * geom.h * geom.w, geom.o * geom.positions());
    let mut out = vec![T::zero(); n * out_len];
    let (xd, wd) = (x.data(), weight.data());
    out.par_chunks_mut(out_len)
        .zip(xd.par_chunks(in_len))
        .for_each(|(y, xs)| {
            let p = geom.positions();
            if geom.is_pointwise() {
                gemm(geom.o, geom.c, p, wd, false, xs, false, y, false);
            } else {
                let mut cols = vec![T::zero(); geom.patch() * p];
                geom.im2col(xs, &mut cols);
                gemm(geom.o, geom.patch(), p, wd, false, &cols, false, y, false);
            }
            if let Some(b) = bias {
                for (o, chunk) in y.chunks_mut(p).enumerate() {
                    let bo = b.data()[o];
                    chunk.iter_mut().for_each(|v| *v = *v + bo);
                }
            }
        });
    Tensor::new([n, geom.o, geom.oh, geom.ow], out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub(crate) fn backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let geom = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    let n = x.shape()[0];
    let p = geom.positions();
    let (in_len, out_len) = (geom.c * geom.h * geom.w, geom.o * p);
    let (xd, wd, gd) = (x.data(), weight.data(), grad.data());

    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let xs = &xd[b * in_len..(b + 1) * in_len];
            let gs = &gd[b * out_len..(b + 1) * out_len];
            let mut dw = vec![T::zero(); weight.len()];
            let dx = if geom.is_pointwise() {
                gemm(geom.o, p, geom.c, gs, false, xs, true, &mut dw, false);
                need_dx.then(|| {
                    let mut dx = vec![T::zero(); in_len];
                    gemm(geom.c, geom.o, p, wd, true, gs, false, &mut dx, false);
                    dx
                })
            } else {
                let mut cols = vec![T::zero(); geom.patch() * p];
                geom.im2col(xs, &mut cols);
                gemm(geom.o, p, geom.patch(), gs, false, &cols, true, &mut dw, false);
                need_dx.then(|| {
                    gemm(geom.patch(), geom.o, p, wd, true, gs, false, &mut cols, false);
                    let mut dx = vec![T::zero(); in_len];
                    geom.col2im(&cols, &mut dx);
                    dx
                })
            };
            (dw, dx)
        })
        .collect();

    let mut dw = Tensor::zeros(weight.shape().to_vec());
    let mut dx = need_dx.then(|| Vec::with_capacity(n * in_len));
    for (w, x) in per_sample {
        for (a, b) in dw.data_mut().iter_mut().zip(w) {
            *a = *a + b;
        }
        if let (Some(acc), Some(x)) = (dx.as_mut(), x) {
            acc.extend(x);
        }
    }
    let mut db = vec![T::zero(); geom.o];
    for b in 0..n {
        for (o, slot) in db.iter_mut().enumerate() {
            let s: T = gd[b * out_len + o * p..b * out_len + (o + 1) * p].iter().copied().sum();
            *slot = *slot + s;
        }
    }
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        dw,
        db: Tensor::new([geom.o], db)?,
    })
}
