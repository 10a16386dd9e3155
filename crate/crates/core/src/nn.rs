//! Parameterized layers and the per-pass forward context.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::graph::{BatchStats, Graph, NodeId};
use crate::oni::{self, OniConfig};
use crate::ops::norm::BN_MOMENTUM;
use crate::param::{BufferId, ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct BnUpdate<T> {
    mean: BufferId,
    var: BufferId,
    stats: BatchStats<T>,
}

/// One forward pass: the graph being recorded plus read-only access to the
/// parameters. Batch-norm statistics observed in train mode are queued and
/// applied to the store by [`Forward::finish`].
pub struct Forward<'s, T: Real> {
    pub graph: Graph<T>,
    pub store: &'s ParamStore<T>,
    pub mode: Mode,
    pub oni: OniConfig,
    updates: Vec<BnUpdate<T>>,
}

/// Queued running-statistics updates from a finished pass.
pub struct PendingStats<T>(Vec<BnUpdate<T>>);

impl<T: Real> PendingStats<T> {
    pub fn apply(self, store: &mut ParamStore<T>) {
        let m = T::c(BN_MOMENTUM);
        for u in self.0 {
            for (buf, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                for (r, &b) in store.buffer_mut(buf).data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<'s, T: Real> Forward<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode, oni: OniConfig) -> Self {
        Forward {
            graph: Graph::new(),
            store,
            mode,
            oni,
            updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        self.graph.param(self.store, id)
    }

    /// Effective (possibly orthogonalized) weight of a parameter.
    pub fn weight(&mut self, id: ParamId) -> Result<NodeId> {
        oni::effective_weight(&mut self.graph, self.store, id, &self.oni)
    }

    pub fn finish(self) -> (Graph<T>, PendingStats<T>) {
        (self.graph, PendingStats(self.updates))
    }
}

fn normal_tensor<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| T::c(dist.sample(rng)))
}

fn uniform_tensor<T: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let dist = Uniform::new(-bound, bound).expect("non-empty range");
    Tensor::from_fn(shape.to_vec(), |_| T::c(dist.sample(rng)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
    pub orthogonal: bool,
}

impl Conv2d {
    /// Kaiming-normal weights, zero bias, "same" padding for odd kernels.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        spec: ConvSpec,
    ) -> Result<Self> {
        let shape = [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let w = normal_tensor(rng, &shape, (2.0 / fan_in as f64).sqrt());
        let weight = if spec.orthogonal {
            oni::check_shape(spec.out_channels, fan_in)?;
            store.add_orthogonal(format!("{name}.weight"), w)?
        } else {
            store.add(format!("{name}.weight"), w, ParamKind::Weight)?
        };
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros([spec.out_channels]), ParamKind::Bias))
            .transpose()?;
        Ok(Conv2d {
            weight,
            bias,
            stride: spec.stride,
            padding: (spec.kernel - 1) / 2,
        })
    }

    pub fn forward<T: Real>(&self, fw: &mut Forward<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = fw.weight(self.weight)?;
        let b = self.bias.map(|b| fw.param(b)).transpose()?;
        fw.graph.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform_tensor(rng, &[outputs, inputs], bound),
            ParamKind::Weight,
        )?;
        let bias = bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros([outputs]), ParamKind::Bias))
            .transpose()?;
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Real>(&self, fw: &mut Forward<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = fw.param(self.weight)?;
        let b = self.bias.map(|b| fw.param(b)).transpose()?;
        fw.graph.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels]), ParamKind::NormScale)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), ParamKind::NormShift)?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones([channels]))?,
        })
    }

    pub fn forward<T: Real>(&self, fw: &mut Forward<'_, T>, x: NodeId) -> Result<NodeId> {
        let gamma = fw.param(self.gamma)?;
        let beta = fw.param(self.beta)?;
        match fw.mode {
            Mode::Train => {
                let (y, stats) = fw.graph.batchnorm_train(x, gamma, beta)?;
                fw.updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let (rm, rv) = (fw.store.buffer(self.running_mean), fw.store.buffer(self.running_var));
                fw.graph.batchnorm_eval(x, gamma, beta, rm.data(), rv.data())
            }
        }
    }
}

/// Normal-initialized free matrix parameter (e.g. classifier weights).
pub fn normal_param<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: &str,
    shape: &[usize],
    std: f64,
) -> Result<ParamId> {
    store.add(name, normal_tensor(rng, shape, std), ParamKind::Weight)
}
