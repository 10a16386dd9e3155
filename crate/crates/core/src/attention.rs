//! Spatial attention modules.
//!
//! * [`CbamBlock`]: channel attention from pooled descriptors through a shared
//!   MLP, then spatial logits from channel-pooled maps through a `k x k` conv.
//!   With a sigmoid on a single logit map it yields the complementary pair
//!   `A_um = sigmoid(Z_s)`, `A_m = 1 - A_um`; with three logit maps and a
//!   channel softmax it is the "channel attention + softmax" intermediate.
//! * [`MfsaBlock`]: multi-focal attention. A pointwise conv / BN / ReLU /
//!   pointwise conv network with orthogonalized weights maps the raw feature
//!   to three logit maps whose channel softmax splits every position into
//!   unmasked, masked and background shares.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{BatchNorm2d, ConvSpec, Conv2d, Forward, Linear};
use crate::ops::pool::PoolMode;
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

/// Graph nodes produced by an attention module.
#[derive(Clone, Debug)]
pub struct AttentionNodes {
    /// Channel attention `[N, C, 1, 1]` (CBAM-based modules only).
    pub a_c: Option<NodeId>,
    /// Channel-refined feature the spatial maps multiply (CBAM-based only).
    pub x_c: Option<NodeId>,
    pub z_s: NodeId,
    pub a_um: NodeId,
    pub a_m: NodeId,
    pub a_bg: Option<NodeId>,
    pub x_um: NodeId,
    pub x_m: NodeId,
    pub x_bg: Option<NodeId>,
}

/// Materialized attention maps (`[N, 1, H, W]`) and attended features.
#[derive(Clone, Debug)]
pub struct AttentionOutputs<T> {
    pub z_s: Tensor<T>,
    pub a_um: Tensor<T>,
    pub a_m: Tensor<T>,
    pub a_bg: Option<Tensor<T>>,
    pub x_um: Tensor<T>,
    pub x_m: Tensor<T>,
    pub x_bg: Option<Tensor<T>>,
}

impl AttentionNodes {
    pub fn materialize<T: Real>(&self, g: &Graph<T>) -> AttentionOutputs<T> {
        AttentionOutputs {
            z_s: g.value(self.z_s).clone(),
            a_um: g.value(self.a_um).clone(),
            a_m: g.value(self.a_m).clone(),
            a_bg: self.a_bg.map(|n| g.value(n).clone()),
            x_um: g.value(self.x_um).clone(),
            x_m: g.value(self.x_m).clone(),
            x_bg: self.x_bg.map(|n| g.value(n).clone()),
        }
    }
}

fn check_channels<T: Real>(g: &Graph<T>, x: NodeId, expected: usize) -> Result<()> {
    let (_, c, _, _) = g.value(x).dims4()?;
    if c != expected {
        return Err(Error::ShapeMismatch {
            op: "attention input channels",
            lhs: vec![expected],
            rhs: g.shape(x).to_vec(),
        });
    }
    Ok(())
}

fn reduced(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || !channels.is_multiple_of(reduction) {
        return Err(Error::invalid(format!(
            "reduction ratio {reduction} must divide {channels} channels"
        )));
    }
    Ok(channels / reduction)
}

/// Splits `[N, 3, H, W]` softmax attention into three maps and applies each
/// to `feature`.
fn three_way<T: Real>(
    g: &mut Graph<T>,
    z_s: NodeId,
    feature: NodeId,
) -> Result<(NodeId, NodeId, NodeId, NodeId, NodeId, NodeId)> {
    let att = g.softmax_channel(z_s)?;
    let a_um = g.slice_channels(att, 0, 1)?;
    let a_m = g.slice_channels(att, 1, 1)?;
    let a_bg = g.slice_channels(att, 2, 1)?;
    let x_um = g.mul(a_um, feature)?;
    let x_m = g.mul(a_m, feature)?;
    let x_bg = g.mul(a_bg, feature)?;
    Ok((a_um, a_m, a_bg, x_um, x_m, x_bg))
}

#[derive(Clone, Debug)]
pub struct CbamBlock {
    pub channels: usize,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub spatial: Conv2d,
    pub spatial_maps: usize,
}

impl CbamBlock {
    /// `spatial_maps` is 1 for the sigmoid (CBAM / CAL) form and 3 for the
    /// softmax form.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        reduction: usize,
        kernel: usize,
        spatial_maps: usize,
    ) -> Result<Self> {
        let hidden = reduced(channels, reduction)?;
        if kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("spatial kernel must be odd, got {kernel}")));
        }
        Ok(CbamBlock {
            channels,
            mlp_in: Linear::new(store, rng, &format!("{name}.mlp.0"), channels, hidden, true)?,
            mlp_out: Linear::new(store, rng, &format!("{name}.mlp.1"), hidden, channels, true)?,
            spatial: Conv2d::new(
                store,
                rng,
                &format!("{name}.spatial"),
                ConvSpec {
                    in_channels: 2,
                    out_channels: spatial_maps,
                    kernel,
                    stride: 1,
                    bias: true,
                    orthogonal: false,
                },
            )?,
            spatial_maps,
        })
    }

    fn mlp<T: Real>(&self, fw: &mut Forward<'_, T>, pooled: NodeId) -> Result<NodeId> {
        let flat = fw.graph.flatten(pooled)?;
        let h = self.mlp_in.forward(fw, flat)?;
        let h = fw.graph.relu(h)?;
        self.mlp_out.forward(fw, h)
    }

    /// `A_c = sigmoid(MLP(maxpool(X)) + MLP(avgpool(X)))`, `X_c = A_c * X`.
    /// Returns `(X_c, A_c)`.
    pub fn channel_stage<T: Real>(&self, fw: &mut Forward<'_, T>, x: NodeId) -> Result<(NodeId, NodeId)> {
        check_channels(&fw.graph, x, self.channels)?;
        let n = fw.graph.shape(x)[0];
        let max = fw.graph.pool_spatial(x, PoolMode::Max)?;
        let avg = fw.graph.pool_spatial(x, PoolMode::Avg)?;
        let m_max = self.mlp(fw, max)?;
        let m_avg = self.mlp(fw, avg)?;
        let logits = fw.graph.add(m_max, m_avg)?;
        let logits = fw.graph.reshape(logits, &[n, self.channels, 1, 1])?;
        let a_c = fw.graph.sigmoid(logits)?;
        let x_c = fw.graph.mul(a_c, x)?;
        Ok((x_c, a_c))
    }

    /// `Z_s = conv([maxpool_c(X_c); avgpool_c(X_c)])`.
    pub fn spatial_logits<T: Real>(&self, fw: &mut Forward<'_, T>, x_c: NodeId) -> Result<NodeId> {
        let max = fw.graph.pool_channel(x_c, PoolMode::Max)?;
        let avg = fw.graph.pool_channel(x_c, PoolMode::Avg)?;
        let stacked = fw.graph.concat_channels(&[max, avg])?;
        self.spatial.forward(fw, stacked)
    }

    /// Complementary split of a channel-refined feature.
    pub fn cal_split<T: Real>(&self, fw: &mut Forward<'_, T>, x_c: NodeId) -> Result<AttentionNodes> {
        if self.spatial_maps != 1 {
            return Err(Error::invalid("cal_split needs a single spatial logit map"));
        }
        let z_s = self.spatial_logits(fw, x_c)?;
        let a_um = fw.graph.sigmoid(z_s)?;
        let a_m = fw.graph.affine(a_um, -1.0, 1.0)?;
        let x_um = fw.graph.mul(a_um, x_c)?;
        let x_m = fw.graph.mul(a_m, x_c)?;
        Ok(AttentionNodes {
            a_c: None,
            x_c: Some(x_c),
            z_s,
            a_um,
            a_m,
            a_bg: None,
            x_um,
            x_m,
            x_bg: None,
        })
    }

    /// Channel stage followed by the complementary split.
    pub fn forward_cal<T: Real>(&self, fw: &mut Forward<'_, T>, x: NodeId) -> Result<AttentionNodes> {
        let (x_c, a_c) = self.channel_stage(fw, x)?;
        let mut out = self.cal_split(fw, x_c)?;
        out.a_c = Some(a_c);
        Ok(out)
    }

    /// Channel stage followed by a three-map channel softmax.
    pub fn forward_softmax<T: Real>(&self, fw: &mut Forward<'_, T>, x: NodeId) -> Result<AttentionNodes> {
        if self.spatial_maps != 3 {
            return Err(Error::invalid("softmax attention needs three spatial logit maps"));
        }
        let (x_c, a_c) = self.channel_stage(fw, x)?;
        let z_s = self.spatial_logits(fw, x_c)?;
        let (a_um, a_m, a_bg, x_um, x_m, x_bg) = three_way(&mut fw.graph, z_s, x_c)?;
        Ok(AttentionNodes {
            a_c: Some(a_c),
            x_c: Some(x_c),
            z_s,
            a_um,
            a_m,
            a_bg: Some(a_bg),
            x_um,
            x_m,
            x_bg: Some(x_bg),
        })
    }
}

/// Number of focal regions: unmasked, masked, background.
pub const FOCAL_MAPS: usize = 3;

#[derive(Clone, Debug)]
pub struct MfsaBlock {
    pub channels: usize,
    pub conv1: Conv2d,
    pub bn: BatchNorm2d,
    pub conv2: Conv2d,
}

impl MfsaBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        let hidden = reduced(channels, reduction)?;
        let conv1 = Conv2d::new(
            store,
            rng,
            &format!("{name}.f.0"),
            ConvSpec {
                in_channels: channels,
                out_channels: hidden,
                kernel: 1,
                stride: 1,
                bias: false,
                orthogonal: true,
            },
        )?;
        let bn = BatchNorm2d::new(store, &format!("{name}.f.1"), hidden)?;
        let conv2 = Conv2d::new(
            store,
            rng,
            &format!("{name}.f.3"),
            ConvSpec {
                in_channels: hidden,
                out_channels: FOCAL_MAPS,
                kernel: 1,
                stride: 1,
                bias: true,
                orthogonal: true,
            },
        )?;
        Ok(MfsaBlock {
            channels,
            conv1,
            bn,
            conv2,
        })
    }

    /// `Z_s = f(X)`, `[A_um, A_m, A_bg] = softmax(Z_s)`, `X_k = A_k * X`.
    pub fn forward<T: Real>(&self, fw: &mut Forward<'_, T>, x: NodeId) -> Result<AttentionNodes> {
        check_channels(&fw.graph, x, self.channels)?;
        let h = self.conv1.forward(fw, x)?;
        let h = self.bn.forward(fw, h)?;
        let h = fw.graph.relu(h)?;
        let z_s = self.conv2.forward(fw, h)?;
        let (a_um, a_m, a_bg, x_um, x_m, x_bg) = three_way(&mut fw.graph, z_s, x)?;
        Ok(AttentionNodes {
            a_c: None,
            x_c: None,
            z_s,
            a_um,
            a_m,
            a_bg: Some(a_bg),
            x_um,
            x_m,
            x_bg: Some(x_bg),
        })
    }
}
