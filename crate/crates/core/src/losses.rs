//! Classification objectives: cross-entropy, the additive angular margin
//! (arcface) loss, and the kernels behind their graph nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Cosines are clamped to `[-1 + eps, 1 - eps]` before `acos`.
pub const COS_CLAMP_EPS: f64 = 1e-7;

/// Scale and margin of the angular-margin head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArcfaceConfig {
    pub scale: f64,
    pub margin: f64,
    /// Past `theta = pi - m` the margined target logit `cos(theta + m)`
    /// starts rising again; when set, it is replaced there by the monotone
    /// `cos(theta) - m sin(m)`.
    pub monotone_fallback: bool,
}

impl Default for ArcfaceConfig {
    fn default() -> Self {
        ArcfaceConfig {
            scale: 64.0,
            margin: 0.5,
            monotone_fallback: false,
        }
    }
}

impl ArcfaceConfig {
    pub fn new(scale: f64, margin: f64) -> Self {
        ArcfaceConfig {
            scale,
            margin,
            monotone_fallback: false,
        }
    }
}

impl ArcfaceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("arcface scale must be positive, got {}", self.scale)));
        }
        if !(0.0..std::f64::consts::PI).contains(&self.margin) {
            return Err(Error::invalid(format!(
                "arcface margin must lie in [0, pi), got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::invalid(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Row-wise softmax with max subtraction; returns the probabilities and the
/// mean negative log-probability of the labelled entries.
fn softmax_nll<T: Real>(logits: &[T], k: usize, labels: &[usize]) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for (i, (row, prow)) in logits.chunks(k).zip(probs.chunks_mut(k)).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (p, &l) in prow.iter_mut().zip(row) {
            *p = (l - max).exp();
            z = z + *p;
        }
        prow.iter_mut().for_each(|p| *p = *p / z);
        total = total + (z.ln() + max - row[labels[i]]);
    }
    (total / T::c(labels.len() as f64), probs)
}

pub fn cross_entropy_forward<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Vec<T>)> {
    let (n, k) = logits.dims2()?;
    check_labels(labels, n, k)?;
    Ok(softmax_nll(logits.data(), k, labels))
}

pub(crate) fn cross_entropy_backward<T: Real>(
    shape: &[usize],
    labels: &[usize],
    probs: &[T],
    g: T,
) -> Result<Tensor<T>> {
    let k = shape[1];
    let scale = g / T::c(labels.len() as f64);
    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (i, &y) in labels.iter().enumerate() {
        d[i * k + y] = d[i * k + y] - scale;
    }
    Tensor::new(shape.to_vec(), d)
}

/// Forward quantities the arcface backward pass reuses.
#[derive(Clone, Debug)]
pub struct ArcfaceSaved<T> {
    labels: Vec<usize>,
    scale: T,
    margin: T,
    /// Unclamped cosines, `[N, N_c]`.
    cos: Vec<T>,
    /// `dlogit/dcos` per entry (zero where the clamp is active).
    dlogit_dcos: Vec<T>,
    probs: Vec<T>,
    z_norm: Vec<T>,
    w_norm: Vec<T>,
    classes: usize,
}

/// Loss value and saved state. `z: [N, D]`, `w: [D, N_c]`.
pub fn arcface_forward<T: Real>(
    z: &Tensor<T>,
    w: &Tensor<T>,
    labels: &[usize],
    cfg: &ArcfaceConfig,
) -> Result<(T, ArcfaceSaved<T>)> {
    cfg.validate()?;
    let (n, d) = z.dims2()?;
    let (d2, classes) = w.dims2()?;
    if d != d2 {
        return Err(Error::ShapeMismatch {
            op: "arcface",
            lhs: z.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    check_labels(labels, n, classes)?;
    let z_norm: Vec<T> = z.data().chunks(d).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
    let mut w_norm = vec![T::zero(); classes];
    for row in w.data().chunks(classes) {
        for (acc, &v) in w_norm.iter_mut().zip(row) {
            *acc = *acc + v * v;
        }
    }
    w_norm.iter_mut().for_each(|v| *v = v.sqrt());
    if let Some(i) = z_norm.iter().position(|&v| v == T::zero()) {
        return Err(Error::invalid(format!("arcface: embedding {i} has zero norm")));
    }
    if let Some(j) = w_norm.iter().position(|&v| v == T::zero()) {
        return Err(Error::invalid(format!("arcface: class weight column {j} has zero norm")));
    }

    let mut cos = vec![T::zero(); n * classes];
    gemm(n, d, classes, z.data(), false, w.data(), false, &mut cos, false);
    let (s, m) = (T::c(cfg.scale), T::c(cfg.margin));
    // cos(pi - m): below it the fallback, when enabled, takes over.
    let turn = T::c((std::f64::consts::PI - cfg.margin).cos());
    let fallback_shift = T::c(cfg.margin * cfg.margin.sin());
    let (lo, hi) = (T::c(-1.0 + COS_CLAMP_EPS), T::c(1.0 - COS_CLAMP_EPS));
    let mut logits = vec![T::zero(); n * classes];
    let mut dlogit_dcos = vec![T::zero(); n * classes];
    for i in 0..n {
        for j in 0..classes {
            let idx = i * classes + j;
            let c = cos[idx] / (z_norm[i] * w_norm[j]);
            cos[idx] = c;
            let clamped = c.max(lo).min(hi);
            let active = c >= lo && c <= hi;
            if j == labels[i] && cfg.monotone_fallback && clamped <= turn {
                logits[idx] = s * (clamped - fallback_shift);
                if active {
                    dlogit_dcos[idx] = s;
                }
            } else if j == labels[i] {
                let theta = clamped.acos();
                logits[idx] = s * (theta + m).cos();
                if active {
                    dlogit_dcos[idx] = s * (theta + m).sin() / theta.sin();
                }
            } else {
                logits[idx] = s * clamped;
                if active {
                    dlogit_dcos[idx] = s;
                }
            }
        }
    }
    let (loss, probs) = softmax_nll(&logits, classes, labels);
    Ok((
        loss,
        ArcfaceSaved {
            labels: labels.to_vec(),
            scale: s,
            margin: m,
            cos,
            dlogit_dcos,
            probs,
            z_norm,
            w_norm,
            classes,
        },
    ))
}

/// Gradients `(dz, dw)` of `g * loss`.
pub fn arcface_backward<T: Real>(
    saved: &ArcfaceSaved<T>,
    z: &Tensor<T>,
    w: &Tensor<T>,
    g: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, d) = z.dims2()?;
    let classes = saved.classes;
    let inv_n = g / T::c(n as f64);
    // dL/dcos, then H = dL/dcos / (|z_i| |w_j|).
    let mut gc = vec![T::zero(); n * classes];
    let mut h = vec![T::zero(); n * classes];
    let mut row_sum = vec![T::zero(); n];
    let mut col_sum = vec![T::zero(); classes];
    for i in 0..n {
        for j in 0..classes {
            let idx = i * classes + j;
            let target = if j == saved.labels[i] { T::one() } else { T::zero() };
            let v = (saved.probs[idx] - target) * inv_n * saved.dlogit_dcos[idx];
            gc[idx] = v;
            h[idx] = v / (saved.z_norm[i] * saved.w_norm[j]);
            row_sum[i] = row_sum[i] + v * saved.cos[idx];
            col_sum[j] = col_sum[j] + v * saved.cos[idx];
        }
    }
    let mut dz = vec![T::zero(); n * d];
    gemm(n, classes, d, &h, false, w.data(), true, &mut dz, false);
    for (i, row) in dz.chunks_mut(d).enumerate() {
        let k = row_sum[i] / (saved.z_norm[i] * saved.z_norm[i]);
        for (v, &zv) in row.iter_mut().zip(&z.data()[i * d..(i + 1) * d]) {
            *v = *v - k * zv;
        }
    }
    let mut dw = vec![T::zero(); d * classes];
    gemm(d, n, classes, z.data(), true, &h, false, &mut dw, false);
    for (row, wrow) in dw.chunks_mut(classes).zip(w.data().chunks(classes)) {
        for j in 0..classes {
            row[j] = row[j] - col_sum[j] / (saved.w_norm[j] * saved.w_norm[j]) * wrow[j];
        }
    }
    Ok((Tensor::new([n, d], dz)?, Tensor::new([d, classes], dw)?))
}

impl<T> ArcfaceSaved<T> {
    pub fn classes(&self) -> usize {
        self.classes
    }
}

impl<T: Real> ArcfaceSaved<T> {
    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn margin(&self) -> T {
        self.margin
    }
}
