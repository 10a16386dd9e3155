//! Helpers shared by the integration tests.
#![allow(dead_code)]

use occlusion_attn::attention::{CbamBlock, MfsaBlock};
use occlusion_attn::nn::{Forward, Mode};
use occlusion_attn::oni::OniConfig;
use occlusion_attn::param::ParamStore;
use occlusion_attn::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape.to_vec(), |_| T::c(dist.sample(rng)))
}

/// Attention maps and attended features of one module pass, with the
/// feature the attended parts must add up to.
pub struct Split<T> {
    pub a_um: Tensor<T>,
    pub a_m: Tensor<T>,
    pub a_bg: Option<Tensor<T>>,
    pub x_um: Tensor<T>,
    pub x_m: Tensor<T>,
    pub x_bg: Option<Tensor<T>>,
    pub whole: Tensor<T>,
}

/// A freshly initialized CBAM + complementary-split block applied to `x`.
pub fn cal_split<T: Real>(param_seed: u64, x: &Tensor<T>, mode: Mode) -> Split<T> {
    let c = x.shape()[1];
    let mut store = ParamStore::new();
    let block = CbamBlock::new(&mut store, &mut rng(param_seed), "cal", c, 2, 3, 1).unwrap();
    let mut fw = Forward::new(&store, mode, OniConfig::default());
    let input = fw.graph.input(x.clone()).unwrap();
    let nodes = block.forward_cal(&mut fw, input).unwrap();
    let out = nodes.materialize(&fw.graph);
    Split {
        a_um: out.a_um,
        a_m: out.a_m,
        a_bg: None,
        x_um: out.x_um,
        x_m: out.x_m,
        x_bg: None,
        whole: fw.graph.value(nodes.x_c.unwrap()).clone(),
    }
}

/// A freshly initialized multi-focal block applied to `x`.
pub fn mfsa_split<T: Real>(param_seed: u64, x: &Tensor<T>, mode: Mode) -> Split<T> {
    let c = x.shape()[1];
    let mut store = ParamStore::new();
    let block = MfsaBlock::new(&mut store, &mut rng(param_seed), "mfsa", c, 2).unwrap();
    let mut fw = Forward::new(&store, mode, OniConfig::default());
    let input = fw.graph.input(x.clone()).unwrap();
    let out = block.forward(&mut fw, input).unwrap().materialize(&fw.graph);
    Split {
        a_um: out.a_um,
        a_m: out.a_m,
        a_bg: out.a_bg,
        x_um: out.x_um,
        x_m: out.x_m,
        x_bg: out.x_bg,
        whole: x.clone(),
    }
}

/// Largest `|a + b (+ c) - expected|` over all elements.
pub fn sum_error<T: Real>(parts: &[&Tensor<T>], expected: impl Fn(usize) -> f64) -> f64 {
    let n = parts[0].len();
    (0..n)
        .map(|i| (parts.iter().map(|p| p.data()[i].f64()).sum::<f64>() - expected(i)).abs())
        .fold(0.0, f64::max)
}

/// TAR at `far` by sweeping every candidate threshold: each score and the
/// next float above it. The smallest threshold whose impostor acceptance
/// rate is at most `far` has the largest TAR.
pub fn tar_oracle(genuine: &[f64], impostor: &[f64], far: f64) -> f64 {
    let mut candidates = vec![f64::NEG_INFINITY];
    for &s in genuine.iter().chain(impostor) {
        candidates.push(s);
        candidates.push(s.next_up());
    }
    let rate = |set: &[f64], t: f64| set.iter().filter(|&&s| s >= t).count() as f64 / set.len() as f64;
    candidates
        .into_iter()
        .filter(|&t| rate(impostor, t) <= far)
        .map(|t| rate(genuine, t))
        .fold(0.0, f64::max)
}
