//! Central finite-difference gradient checks in float64.
//!
//! Each check compares the reverse-mode gradient of a scalar against
//! `(f(x + h) - f(x - h)) / 2h` for every input element. The error of one
//! tensor is `max|g - fd| / max(max|fd|, max|g|, 1e-8)`; a check reports the
//! worst tensor. Non-scalar outputs are reduced by a fixed random projection.

use std::fmt;

use rand::Rng;

use crate::data::rng_for;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::ArcfaceConfig;
use crate::model::{ArchConfig, Batch, Model, ModelConfig, ModelVariant};
use crate::nn::Mode;
use crate::ops::pool::PoolMode;
use crate::oni;
use crate::param::ParamId;
use crate::tensor::Tensor;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;
const PRIMITIVE_STEP: f64 = 1e-6;
const MODEL_STEP: f64 = 1e-7;

/// Variants whose assembled gradients are checked.
pub const MODEL_VARIANTS: [ModelVariant; 5] = [
    ModelVariant::Baseline,
    ModelVariant::CbamCal,
    ModelVariant::MfsaCal,
    ModelVariant::BaselineAdv,
    ModelVariant::CbamCalAdv,
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Number of scalar inputs perturbed.
    pub evaluated: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} max rel err {:.3e} (tol {:.0e}, {} inputs)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.tolerance,
            self.evaluated
        )
    }
}

pub fn relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / inf(analytic).max(inf(reference)).max(1e-8)
}

/// Graph builder for [`check_inputs`]: receives one variable per input.
pub type Builder<'a> = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'a;

/// Checks the gradient of `build` with respect to every element of `inputs`.
pub fn check_inputs(name: &str, inputs: &[Tensor<f64>], tolerance: f64, build: &Builder<'_>) -> Result<CheckResult> {
    check_scaled(name, inputs, tolerance, 1.0, build)
}

/// As [`check_inputs`], with the finite-difference reference multiplied by
/// `fd_factor` (for operations whose backward deliberately differs from the
/// derivative of their forward).
pub fn check_scaled(
    name: &str,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    fd_factor: f64,
    build: &Builder<'_>,
) -> Result<CheckResult> {
    let projection = std::cell::OnceCell::new();
    let eval = |values: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let ids = values
            .iter()
            .map(|v| g.variable(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &ids)?;
        let loss = if g.value(out).len() == 1 {
            out
        } else {
            let r = projection.get_or_init(|| {
                let mut rng = rng_for(&[0x6c4d, g.value(out).len() as u64]);
                Tensor::from_fn(g.shape(out).to_vec(), |_| rng.random_range(-1.0..1.0))
            });
            let r = g.input(r.clone())?;
            let prod = g.mul(out, r)?;
            g.sum(prod)?
        };
        let value = g.value(loss).item();
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = ids
            .iter()
            .zip(values)
            .map(|(&id, v)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().to_vec())))
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    let mut evaluated = 0;
    let mut values = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        let mut fd = vec![0.0; grad.len()];
        for (k, slot) in fd.iter_mut().enumerate() {
            let orig = values[t].data()[k];
            values[t].data_mut()[k] = orig + PRIMITIVE_STEP;
            let plus = eval(&values, false)?.0;
            values[t].data_mut()[k] = orig - PRIMITIVE_STEP;
            let minus = eval(&values, false)?.0;
            values[t].data_mut()[k] = orig;
            *slot = fd_factor * (plus - minus) / (2.0 * PRIMITIVE_STEP);
        }
        evaluated += fd.len();
        worst = worst.max(relative_error(grad.data(), &fd));
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        tolerance,
        evaluated,
    })
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so ReLU kinks lie outside the stencil.
fn off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { v } else { -v }
    })
}

/// Embedding and class weights placing the target angle of sample 0 at
/// `theta` (other rows random).
fn arcface_inputs(rng: &mut impl Rng, theta: f64) -> (Tensor<f64>, Tensor<f64>) {
    let (n, d, c) = (3, 4, 5);
    let mut z = uniform(rng, &[n, d], -1.0, 1.0);
    let w = uniform(rng, &[d, c], -1.0, 1.0);
    // Class 0 column of w is (w00, w10, w20, w30); rotate it within its plane
    // with the first axis to hit the requested angle.
    let col: Vec<f64> = (0..d).map(|i| w.data()[i * c]).collect();
    let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u: Vec<f64> = col.iter().map(|v| v / norm).collect();
    let mut perp: Vec<f64> = (0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    let dot: f64 = perp.iter().zip(&u).map(|(a, b)| a * b).sum();
    perp.iter_mut().zip(&u).for_each(|(p, b)| *p -= dot * b);
    let pn = perp.iter().map(|v| v * v).sum::<f64>().sqrt();
    for i in 0..d {
        z.data_mut()[i] = 1.3 * (theta.cos() * u[i] + theta.sin() * perp[i] / pn);
    }
    (z, w)
}

/// Finite-difference checks of every differentiable primitive.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = rng_for(&[0x9c, seed]);
    let tol = PRIMITIVE_TOLERANCE;
    let mut out = Vec::new();
    let x4 = [2, 3, 4, 4];
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, build: &Builder<'_>| -> Result<()> {
        out.push(check_inputs(name, &inputs, tol, build)?);
        Ok(())
    };

    run(
        "add (broadcast)",
        vec![uniform(&mut rng, &x4, -1.0, 1.0), uniform(&mut rng, &[1, 3, 1, 1], -1.0, 1.0)],
        &|g, v| g.add(v[0], v[1]),
    )?;
    run(
        "sub (broadcast)",
        vec![uniform(&mut rng, &x4, -1.0, 1.0), uniform(&mut rng, &[2, 1, 4, 4], -1.0, 1.0)],
        &|g, v| g.sub(v[0], v[1]),
    )?;
    run(
        "mul (broadcast)",
        vec![uniform(&mut rng, &x4, -1.0, 1.0), uniform(&mut rng, &[2, 1, 4, 4], -1.0, 1.0)],
        &|g, v| g.mul(v[0], v[1]),
    )?;
    run("affine", vec![uniform(&mut rng, &x4, -1.0, 1.0)], &|g, v| g.affine(v[0], -1.7, 0.3))?;
    run("scale", vec![uniform(&mut rng, &x4, -1.0, 1.0)], &|g, v| g.scale(v[0], 2.5))?;
    run("sum", vec![uniform(&mut rng, &x4, -1.0, 1.0)], &|g, v| {
        let sq = g.mul(v[0], v[0])?;
        g.sum(sq)
    })?;
    run("mean", vec![uniform(&mut rng, &x4, -1.0, 1.0)], &|g, v| {
        let sq = g.mul(v[0], v[0])?;
        g.mean(sq)
    })?;
    run("reshape", vec![uniform(&mut rng, &x4, -1.0, 1.0)], &|g, v| g.reshape(v[0], &[6, 16]))?;
    run(
        "matmul",
        vec![uniform(&mut rng, &[3, 4], -1.0, 1.0), uniform(&mut rng, &[4, 5], -1.0, 1.0)],
        &|g, v| g.matmul(v[0], v[1]),
    )?;
    run("transpose", vec![uniform(&mut rng, &[3, 5], -1.0, 1.0)], &|g, v| g.transpose(v[0]))?;
    run("frobenius_normalize", vec![uniform(&mut rng, &[3, 5], -1.0, 1.0)], &|g, v| {
        g.frobenius_normalize(v[0])
    })?;
    run(
        "conv2d 3x3 s1 p1 + bias",
        vec![
            uniform(&mut rng, &[2, 3, 5, 5], -1.0, 1.0),
            uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0),
            uniform(&mut rng, &[4], -1.0, 1.0),
        ],
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    )?;
    run(
        "conv2d 3x3 s2 p1",
        vec![uniform(&mut rng, &[2, 3, 6, 6], -1.0, 1.0), uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0)],
        &|g, v| g.conv2d(v[0], v[1], None, 2, 1),
    )?;
    run(
        "conv2d 1x1",
        vec![uniform(&mut rng, &x4, -1.0, 1.0), uniform(&mut rng, &[5, 3, 1, 1], -1.0, 1.0)],
        &|g, v| g.conv2d(v[0], v[1], None, 1, 0),
    )?;
    run(
        "linear + bias",
        vec![
            uniform(&mut rng, &[4, 6], -1.0, 1.0),
            uniform(&mut rng, &[3, 6], -1.0, 1.0),
            uniform(&mut rng, &[3], -1.0, 1.0),
        ],
        &|g, v| g.linear(v[0], v[1], Some(v[2])),
    )?;
    for (name, mode, spatial) in [
        ("pool spatial avg", PoolMode::Avg, true),
        ("pool spatial max", PoolMode::Max, true),
        ("pool channel avg", PoolMode::Avg, false),
        ("pool channel max", PoolMode::Max, false),
    ] {
        run(name, vec![uniform(&mut rng, &x4, -1.0, 1.0)], &move |g, v| {
            if spatial {
                g.pool_spatial(v[0], mode)
            } else {
                g.pool_channel(v[0], mode)
            }
        })?;
    }
    run(
        "concat_channels",
        vec![uniform(&mut rng, &x4, -1.0, 1.0), uniform(&mut rng, &[2, 2, 4, 4], -1.0, 1.0)],
        &|g, v| g.concat_channels(&[v[0], v[1]]),
    )?;
    run("slice_channels", vec![uniform(&mut rng, &x4, -1.0, 1.0)], &|g, v| g.slice_channels(v[0], 1, 2))?;
    run("sigmoid", vec![uniform(&mut rng, &x4, -3.0, 3.0)], &|g, v| g.sigmoid(v[0]))?;
    run("relu", vec![off_zero(&mut rng, &x4)], &|g, v| g.relu(v[0]))?;
    run("softmax_channel", vec![uniform(&mut rng, &x4, -3.0, 3.0)], &|g, v| g.softmax_channel(v[0]))?;
    run(
        "batchnorm train",
        vec![
            uniform(&mut rng, &x4, -2.0, 2.0),
            uniform(&mut rng, &[3], 0.5, 1.5),
            uniform(&mut rng, &[3], -0.5, 0.5),
        ],
        &|g, v| Ok(g.batchnorm_train(v[0], v[1], v[2])?.0),
    )?;
    let (rm, rv) = (
        uniform(&mut rng, &[3], -0.5, 0.5).into_data(),
        uniform(&mut rng, &[3], 0.5, 2.0).into_data(),
    );
    run(
        "batchnorm eval",
        vec![
            uniform(&mut rng, &x4, -2.0, 2.0),
            uniform(&mut rng, &[3], 0.5, 1.5),
            uniform(&mut rng, &[3], -0.5, 0.5),
        ],
        &|g, v| g.batchnorm_eval(v[0], v[1], v[2], &rm, &rv),
    )?;
    let labels = [2usize, 0, 4, 1];
    run("cross_entropy", vec![uniform(&mut rng, &[4, 5], -3.0, 3.0)], &|g, v| {
        g.cross_entropy(v[0], &labels)
    })?;
    let z = uniform(&mut rng, &[3, 6], -1.0, 1.0);
    run("oni (T=5)", vec![z], &|g, v| oni::orthogonalize_node(g, v[0], 5))?;
    let lambda = 0.7;
    out.push(check_scaled(
        "grad_reverse",
        &[uniform(&mut rng, &x4, -1.0, 1.0)],
        tol,
        -lambda,
        &|g, v| g.grad_reverse(v[0], lambda),
    )?);

    let arc_labels = [0usize, 3, 1];
    for (name, theta, fallback) in [
        ("arcface", 1.1, false),
        ("arcface near theta=0", 0.02, false),
        ("arcface near theta=pi", std::f64::consts::PI - 0.02, false),
        ("arcface fallback region", std::f64::consts::PI - 0.2, true),
    ] {
        let (z, w) = arcface_inputs(&mut rng, theta);
        let cfg = ArcfaceConfig {
            monotone_fallback: fallback,
            ..ArcfaceConfig::default()
        };
        out.push(check_inputs(name, &[z, w], tol, &|g, v| g.arcface(v[0], v[1], &arc_labels, &cfg))?);
    }
    Ok(out)
}

/// Smallest configuration that exercises every branch of `variant`.
pub fn tiny_model_config(variant: ModelVariant) -> ModelConfig {
    ModelConfig {
        variant,
        image_size: 16,
        num_classes: 3,
        arch: ArchConfig {
            widths: vec![4, 12],
            strides: vec![2, 2],
            reduction: 4,
            spatial_kernel: 3,
            embedding_dim: 6,
            grl_lambda: 0.5,
            w_mask: 0.8,
            w_adv: 0.6,
            ..ArchConfig::default()
        },
    }
}

fn tiny_batch(config: &ModelConfig, seed: u64) -> Batch<f64> {
    let mut rng = rng_for(&[0xba7c, seed]);
    let n = 4;
    let s = config.image_size;
    Batch {
        images: uniform(&mut rng, &[n, 3, s, s], 0.0, 1.0),
        labels: (0..n).map(|i| i % config.num_classes).collect(),
        mask_flags: (0..n).map(|i| i % 2 == 1).collect(),
    }
}

/// The trained objective split at the gradient reversal: the adversarial
/// term enters upstream parameters with factor `-lambda * w_adv` and its own
/// head with `+w_adv`.
fn split_objective(model: &Model<f64>, batch: &Batch<f64>) -> Result<(f64, f64)> {
    let mut fw = model.forward_context(Mode::Train);
    let nodes = model.forward_train(&mut fw, batch)?;
    let g = &fw.graph;
    let arch = &model.config.arch;
    let mut rest = g.value(nodes.arc).item();
    if let Some(m) = nodes.mask {
        rest += arch.w_mask * g.value(m).item();
    }
    let adv = nodes.adv.map_or(0.0, |a| arch.w_adv * g.value(a).item());
    Ok((rest, adv))
}

/// Gradient check of the total training loss with respect to every model
/// parameter (proxy weights for orthogonalized layers).
pub fn model_check(variant: ModelVariant, seed: u64) -> Result<CheckResult> {
    let config = tiny_model_config(variant);
    let mut model = Model::<f64>::new(config.clone(), seed)?;
    let batch = tiny_batch(&config, seed);

    let mut fw = model.forward_context(Mode::Train);
    let nodes = model.forward_train(&mut fw, &batch)?;
    let (mut g, _) = fw.finish();
    g.backward(nodes.total)?;
    let ids: Vec<ParamId> = model.store.ids().collect();
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| {
            g.param_node(id)
                .and_then(|n| g.grad(n).cloned())
                .unwrap_or_else(|| Tensor::zeros(model.store.get(id).value.shape().to_vec()))
        })
        .collect();

    let lambda = model.config.arch.grl_lambda;
    let mut worst = 0.0f64;
    let mut evaluated = 0;
    for (&id, grad) in ids.iter().zip(&analytic) {
        let adv_factor = if model.store.get(id).name.starts_with("adv_head.") { 1.0 } else { -lambda };
        let mut fd = vec![0.0; grad.len()];
        for (k, slot) in fd.iter_mut().enumerate() {
            let orig = model.store.get(id).value.data()[k];
            model.store.get_mut(id).value.data_mut()[k] = orig + MODEL_STEP;
            let (rp, ap) = split_objective(&model, &batch)?;
            model.store.get_mut(id).value.data_mut()[k] = orig - MODEL_STEP;
            let (rm, am) = split_objective(&model, &batch)?;
            model.store.get_mut(id).value.data_mut()[k] = orig;
            *slot = ((rp - rm) + adv_factor * (ap - am)) / (2.0 * MODEL_STEP);
        }
        evaluated += fd.len();
        worst = worst.max(relative_error(grad.data(), &fd));
    }
    if evaluated == 0 {
        return Err(Error::invalid("model has no parameters to check"));
    }
    Ok(CheckResult {
        name: format!("model {variant}"),
        max_rel_error: worst,
        tolerance: MODEL_TOLERANCE,
        evaluated,
    })
}

/// Primitive checks followed by every assembled variant.
pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = primitive_suite(seed)?;
    for v in MODEL_VARIANTS {
        out.push(model_check(v, seed)?);
    }
    Ok(out)
}
