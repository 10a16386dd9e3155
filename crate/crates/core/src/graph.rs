//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its value and whatever it needs for
//! the backward pass. [`Graph::backward`] walks the nodes in exact reverse
//! creation order and accumulates gradients additively, so a node consumed by
//! several branches receives the sum of their contributions.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::losses::{self, ArcfaceConfig, ArcfaceSaved};
use crate::ops::pool::PoolMode;
use crate::ops::{activation, broadcast, conv, norm, pool};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose backward pass is supplied by the caller.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &str;

    /// Gradients with respect to each input, in input order.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>>;
}

/// Running statistics observed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T: Real> {
    Leaf,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine(NodeId, T),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    FrobNormalize(NodeId, T),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    PoolSpatial(NodeId, PoolMode, Vec<usize>),
    PoolChannel(NodeId, PoolMode, Vec<usize>),
    Concat(Vec<NodeId>),
    SliceChannels(NodeId, usize),
    Sigmoid(NodeId),
    Relu(NodeId),
    SoftmaxChannel(NodeId),
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GradReverse(NodeId, T),
    CrossEntropy(NodeId, Vec<usize>, Vec<T>),
    Arcface(NodeId, NodeId, Box<ArcfaceSaved<T>>),
    Custom(Vec<NodeId>, Box<dyn CustomOp<T>>),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "elementwise_mul",
            Op::Affine(..) => "affine",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::FrobNormalize(..) => "frobenius_normalize",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::PoolSpatial(..) => "pool_spatial",
            Op::PoolChannel(..) => "pool_channel",
            Op::Concat(_) => "concat_channels",
            Op::SliceChannels(..) => "slice_channels",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::SoftmaxChannel(_) => "softmax_channel",
            Op::BatchNormTrain { .. } => "batchnorm_train",
            Op::BatchNormEval { .. } => "batchnorm_eval",
            Op::GradReverse(..) => "grad_reverse",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::Arcface(..) => "arcface",
            Op::Custom(_, op) => op.name(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation record for one forward/backward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, NodeId>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `id`;
    /// `None` when the node did not influence the loss.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Node bound to a parameter, if the parameter was used.
    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.params.get(&id).copied()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        let rg = self.rg(inputs);
        self.push(value, op, rg)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<NodeId> {
        if let Some(&node) = self.params.get(&id) {
            return Ok(node);
        }
        let node = self.push(store.get(id).value.clone(), Op::Param, true)?;
        self.params.insert(id, node);
        Ok(node)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast::binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.derived(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast::binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.derived(v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product with size-1 broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast::binary("elementwise_mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.derived(v, Op::Mul(a, b), &[a, b])
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let (s, t) = (T::c(scale), T::c(shift));
        let v = self.value(x).map(|v| s * v + t);
        self.derived(v, Op::Affine(x, s), &[x])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.affine(x, factor, 0.0)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum());
        self.derived(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::c(t.len() as f64));
        self.derived(v, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        self.derived(v, Op::Reshape(x), &[x])
    }

    /// `[N, C, 1, 1]` to `[N, C]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x);
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let v = Tensor::new([m, n], out)?;
        self.derived(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = transpose2(self.value(x))?;
        self.derived(v, Op::Transpose(x), &[x])
    }

    /// `x / ||x||_F`.
    pub fn frobenius_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let norm = self.value(x).norm();
        if norm == T::zero() {
            return Err(Error::invalid("frobenius_normalize: zero-norm input"));
        }
        let v = self.value(x).map(|v| v / norm);
        self.derived(v, Op::FrobNormalize(x, norm), &[x])
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let v = conv::forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.derived(v, Op::Conv2d { x, w, b, stride, padding }, &ins)
    }

    /// `x W^T + b` for `x: [N, K]`, `W: [O, K]`, `b: [O]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (n, k) = self.value(x).dims2()?;
        let (o, k2) = self.value(w).dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: vec![n, k],
                rhs: vec![o, k2],
            });
        }
        let mut out = vec![T::zero(); n * o];
        gemm(n, k, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![o],
                    rhs: bv.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v = *v + bb;
                }
            }
        }
        let v = Tensor::new([n, o], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.derived(v, Op::Linear { x, w, b }, &ins)
    }

    pub fn pool_spatial(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        let (v, arg) = pool::spatial(self.value(x), mode)?;
        self.derived(v, Op::PoolSpatial(x, mode, arg), &[x])
    }

    pub fn pool_channel(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        let (v, arg) = pool::channel(self.value(x), mode)?;
        self.derived(v, Op::PoolChannel(x, mode, arg), &[x])
    }

    /// Concatenation along dimension 1 of rank-4 tensors.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(parts[0]).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (n, c, h, w) = self.value(p).dims4()?;
            if (n, h, w) != (first.0, first.2, first.3) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total_c += c;
        }
        let (n, _, h, w) = first;
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let v = Tensor::new([n, total_c, h, w], out)?;
        self.derived(v, Op::Concat(parts.to_vec()), parts)
    }

    /// Channels `start..start + len` of a rank-4 tensor.
    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(format!(
                "slice_channels {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&src[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let v = Tensor::new([n, len, h, w], out)?;
        self.derived(v, Op::SliceChannels(x, start), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(activation::sigmoid);
        self.derived(v, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| v.max(T::zero()));
        self.derived(v, Op::Relu(x), &[x])
    }

    pub fn softmax_channel(&mut self, x: NodeId) -> Result<NodeId> {
        let v = activation::softmax_channel(self.value(x))?;
        self.derived(v, Op::SoftmaxChannel(x), &[x])
    }

    /// Train-mode batch norm; the returned statistics feed the running
    /// estimates owned by the caller.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, BatchStats<T>)> {
        let out = norm::train(self.value(x), self.value(gamma), self.value(beta), norm::BN_EPSILON)?;
        let stats = BatchStats {
            mean: out.mean,
            var: out.var_unbiased,
        };
        let op = Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat: out.xhat,
            inv_std: out.inv_std,
        };
        let id = self.derived(out.y, op, &[x, gamma, beta])?;
        Ok((id, stats))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<NodeId> {
        let (y, inv_std) = norm::eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            norm::BN_EPSILON,
        )?;
        let c = inv_std.len();
        let hw: usize = self.shape(x)[2..].iter().product();
        let xhat = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                (v - running_mean[ch]) * inv_std[ch]
            })
            .collect();
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.derived(y, op, &[x, gamma, beta])
    }

    /// Identity forward; backward multiplies the upstream gradient by
    /// `-lambda`.
    pub fn grad_reverse(&mut self, x: NodeId, lambda: f64) -> Result<NodeId> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "grad_reverse lambda must be finite and non-negative, got {lambda}"
            )));
        }
        let v = self.value(x).clone();
        self.derived(v, Op::GradReverse(x, T::c(lambda)), &[x])
    }

    /// Mean negative log-softmax of the target logit over rows of `[N, K]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = losses::cross_entropy_forward(self.value(logits), labels)?;
        self.derived(
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, labels.to_vec(), probs),
            &[logits],
        )
    }

    /// Additive angular margin loss of embeddings `z: [N, D]` against class
    /// weights `w: [D, N_c]`.
    pub fn arcface(
        &mut self,
        z: NodeId,
        w: NodeId,
        labels: &[usize],
        cfg: &ArcfaceConfig,
    ) -> Result<NodeId> {
        let (loss, saved) = losses::arcface_forward(self.value(z), self.value(w), labels, cfg)?;
        self.derived(
            Tensor::scalar(loss),
            Op::Arcface(z, w, Box::new(saved)),
            &[z, w],
        )
    }

    /// Appends a node computed outside the graph whose backward is `op`.
    pub fn custom(
        &mut self,
        inputs: &[NodeId],
        value: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<NodeId> {
        self.derived(value, Op::Custom(inputs.to_vec(), op), inputs)
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of earlier passes
    /// are discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                for (input, contribution) in self.vjp(NodeId(id), &g)? {
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&contribution),
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Copies parameter gradients of the last backward pass into `store`;
    /// parameters not reached by the loss get zero.
    pub fn write_param_grads(&self, store: &mut ParamStore<T>) {
        store.zero_grads();
        for (&pid, &node) in &self.params {
            if let Some(g) = self.grad(node) {
                store.get_mut(pid).grad = g.clone();
            }
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn emit(
        &self,
        out: &mut Vec<(NodeId, Tensor<T>)>,
        target: NodeId,
        f: impl FnOnce() -> Result<Tensor<T>>,
    ) -> Result<()> {
        if self.needs(target) {
            out.push((target, f()?));
        }
        Ok(())
    }

    fn vjp(&self, id: NodeId, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[id.0];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.emit(&mut out, *a, || Ok(broadcast::reduce_to(g, self.shape(*a))))?;
                self.emit(&mut out, *b, || Ok(broadcast::reduce_to(g, self.shape(*b))))?;
            }
            Op::Sub(a, b) => {
                self.emit(&mut out, *a, || Ok(broadcast::reduce_to(g, self.shape(*a))))?;
                self.emit(&mut out, *b, || Ok(broadcast::reduce_to(&g.map(|v| -v), self.shape(*b))))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.emit(&mut out, *a, || {
                    let prod = g.zip_map(&broadcast::expand(bv, g.shape()), |x, y| x * y)?;
                    Ok(broadcast::reduce_to(&prod, av.shape()))
                })?;
                self.emit(&mut out, *b, || {
                    let prod = g.zip_map(&broadcast::expand(av, g.shape()), |x, y| x * y)?;
                    Ok(broadcast::reduce_to(&prod, bv.shape()))
                })?;
            }
            Op::Affine(x, s) => self.emit(&mut out, *x, || Ok(g.map(|v| v * *s)))?,
            Op::Sum(x) => {
                self.emit(&mut out, *x, || Ok(Tensor::full(self.shape(*x).to_vec(), g.item())))?;
            }
            Op::Mean(x) => self.emit(&mut out, *x, || {
                let n = T::c(self.value(*x).len() as f64);
                Ok(Tensor::full(self.shape(*x).to_vec(), g.item() / n))
            })?,
            Op::Reshape(x) => self.emit(&mut out, *x, || g.clone().reshape(self.shape(*x).to_vec()))?,
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.shape(*b)[1];
                self.emit(&mut out, *a, || {
                    let mut d = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut d, false);
                    Tensor::new([m, k], d)
                })?;
                self.emit(&mut out, *b, || {
                    let mut d = vec![T::zero(); k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut d, false);
                    Tensor::new([k, n], d)
                })?;
            }
            Op::Transpose(x) => self.emit(&mut out, *x, || transpose2(g))?,
            Op::FrobNormalize(x, norm) => self.emit(&mut out, *x, || {
                let y = &node.value;
                let dot: T = g.data().iter().zip(y.data()).map(|(&a, &b)| a * b).sum();
                g.zip_map(y, |gv, yv| (gv - yv * dot) / *norm)
            })?,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                if self.needs(*x) || self.needs(*w) || b.is_some_and(|b| self.needs(b)) {
                    let grads = conv::backward(
                        self.value(*x),
                        self.value(*w),
                        g,
                        *stride,
                        *padding,
                        self.needs(*x),
                    )?;
                    if let Some(dx) = grads.dx {
                        out.push((*x, dx));
                    }
                    if self.needs(*w) {
                        out.push((*w, grads.dw));
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        out.push((b, grads.db));
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, k) = self.value(*x).dims2()?;
                let o = self.shape(*w)[0];
                self.emit(&mut out, *x, || {
                    let mut d = vec![T::zero(); n * k];
                    gemm(n, o, k, g.data(), false, self.value(*w).data(), false, &mut d, false);
                    Tensor::new([n, k], d)
                })?;
                self.emit(&mut out, *w, || {
                    let mut d = vec![T::zero(); o * k];
                    gemm(o, n, k, g.data(), true, self.value(*x).data(), false, &mut d, false);
                    Tensor::new([o, k], d)
                })?;
                if let Some(b) = b {
                    self.emit(&mut out, *b, || broadcast::reduce_to(g, &[1, o]).reshape([o]))?;
                }
            }
            Op::PoolSpatial(x, mode, arg) => self.emit(&mut out, *x, || {
                Ok(pool::spatial_backward(self.shape(*x), *mode, arg, g))
            })?,
            Op::PoolChannel(x, mode, arg) => self.emit(&mut out, *x, || {
                Ok(pool::channel_backward(self.shape(*x), *mode, arg, g))
            })?,
            Op::Concat(parts) => {
                let (n, total_c, h, w) = g.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    self.emit(&mut out, p, || {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let base = (b * total_c + offset) * hw;
                            d.extend_from_slice(&g.data()[base..base + c * hw]);
                        }
                        Tensor::new(self.shape(p).to_vec(), d)
                    })?;
                    offset += c;
                }
            }
            Op::SliceChannels(x, start) => self.emit(&mut out, *x, || {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let len = g.shape()[1];
                let hw = h * w;
                let mut d = Tensor::zeros(self.shape(*x).to_vec());
                for b in 0..n {
                    d.data_mut()[(b * c + start) * hw..(b * c + start + len) * hw]
                        .copy_from_slice(&g.data()[b * len * hw..(b + 1) * len * hw]);
                }
                Ok(d)
            })?,
            Op::Sigmoid(x) => self.emit(&mut out, *x, || {
                g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y))
            })?,
            Op::Relu(x) => self.emit(&mut out, *x, || {
                g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })
            })?,
            Op::SoftmaxChannel(x) => {
                self.emit(&mut out, *x, || Ok(activation::softmax_channel_backward(&node.value, g)))?
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dgamma, dbeta) =
                    norm::train_backward(self.shape(*x), self.value(*gamma), xhat, inv_std, g);
                self.emit(&mut out, *x, || Ok(dx.clone()))?;
                self.emit(&mut out, *gamma, || Ok(dgamma.clone()))?;
                self.emit(&mut out, *beta, || Ok(dbeta.clone()))?;
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (_, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let gm = self.value(*gamma).data();
                self.emit(&mut out, *x, || {
                    Ok(Tensor::from_fn(self.shape(*x).to_vec(), |i| {
                        let ch = (i / hw) % c;
                        g.data()[i] * gm[ch] * inv_std[ch]
                    }))
                })?;
                self.emit(&mut out, *gamma, || {
                    let mut d = vec![T::zero(); c];
                    for (i, (&gv, &xh)) in g.data().iter().zip(xhat).enumerate() {
                        d[(i / hw) % c] = d[(i / hw) % c] + gv * xh;
                    }
                    Tensor::new([c], d)
                })?;
                self.emit(&mut out, *beta, || {
                    let mut d = vec![T::zero(); c];
                    for (i, &gv) in g.data().iter().enumerate() {
                        d[(i / hw) % c] = d[(i / hw) % c] + gv;
                    }
                    Tensor::new([c], d)
                })?;
            }
            Op::GradReverse(x, lambda) => self.emit(&mut out, *x, || Ok(g.map(|v| -*lambda * v)))?,
            Op::CrossEntropy(logits, labels, probs) => self.emit(&mut out, *logits, || {
                losses::cross_entropy_backward(self.shape(*logits), labels, probs, g.item())
            })?,
            Op::Arcface(z, w, saved) => {
                if self.needs(*z) || self.needs(*w) {
                    let (dz, dw) =
                        losses::arcface_backward(saved, self.value(*z), self.value(*w), g.item())?;
                    self.emit(&mut out, *z, || Ok(dz.clone()))?;
                    self.emit(&mut out, *w, || Ok(dw.clone()))?;
                }
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
                let grads = op.backward(&values, &node.value, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::invalid(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (&i, d) in inputs.iter().zip(grads) {
                    if d.shape() != self.shape(i) {
                        return Err(Error::ShapeMismatch {
                            op: "custom backward",
                            lhs: self.shape(i).to_vec(),
                            rhs: d.shape().to_vec(),
                        });
                    }
                    if self.needs(i) {
                        out.push((i, d));
                    }
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn transpose2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    let d = x.data();
    Ok(Tensor::from_fn([c, r], |i| d[(i % r) * c + i / r]))
}
