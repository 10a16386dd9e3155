//! Backbone, attention module and heads assembled into training variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionNodes, AttentionOutputs, CbamBlock, MfsaBlock, FOCAL_MAPS};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::losses::ArcfaceConfig;
use crate::nn::{self, BatchNorm2d, ConvSpec, Conv2d, Forward, Linear, Mode};
use crate::oni::OniConfig;
use crate::ops::pool::PoolMode;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Which attention module and auxiliary heads a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Baseline,
    BaselineAdv,
    CbamCal,
    MfsaCal,
    CbamAdv,
    CbamCalAdv,
    ChannelAttSoftmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    None,
    Cbam,
    Mfsa,
    ChannelSoftmax,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 7] = [
        ModelVariant::Baseline,
        ModelVariant::BaselineAdv,
        ModelVariant::CbamCal,
        ModelVariant::MfsaCal,
        ModelVariant::CbamAdv,
        ModelVariant::CbamCalAdv,
        ModelVariant::ChannelAttSoftmax,
    ];

    pub fn attention(self) -> AttentionKind {
        match self {
            ModelVariant::Baseline | ModelVariant::BaselineAdv => AttentionKind::None,
            ModelVariant::CbamCal | ModelVariant::CbamAdv | ModelVariant::CbamCalAdv => AttentionKind::Cbam,
            ModelVariant::MfsaCal => AttentionKind::Mfsa,
            ModelVariant::ChannelAttSoftmax => AttentionKind::ChannelSoftmax,
        }
    }

    /// Complementary mask-usage branch on `X_m`.
    pub fn has_mask_head(self) -> bool {
        matches!(
            self,
            ModelVariant::CbamCal
                | ModelVariant::MfsaCal
                | ModelVariant::CbamCalAdv
                | ModelVariant::ChannelAttSoftmax
        )
    }

    /// Gradient-reversed mask-usage branch on the recognition feature.
    pub fn has_adv_head(self) -> bool {
        matches!(
            self,
            ModelVariant::BaselineAdv | ModelVariant::CbamAdv | ModelVariant::CbamCalAdv
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Baseline => "baseline",
            ModelVariant::BaselineAdv => "baseline_adv",
            ModelVariant::CbamCal => "cbam_cal",
            ModelVariant::MfsaCal => "mfsa_cal",
            ModelVariant::CbamAdv => "cbam_adv",
            ModelVariant::CbamCalAdv => "cbam_cal_adv",
            ModelVariant::ChannelAttSoftmax => "channel_att_softmax",
        }
    }

    /// Report row label, e.g. `MFSA + CAL + MA=0.5`.
    pub fn label(self, ma: f64) -> String {
        let base = match self {
            ModelVariant::Baseline => "Baseline",
            ModelVariant::BaselineAdv => "Baseline + Adv",
            ModelVariant::CbamCal => "CBAM + CAL",
            ModelVariant::MfsaCal => "MFSA + CAL",
            ModelVariant::CbamAdv => "CBAM + Adv",
            ModelVariant::CbamCalAdv => "CBAM + CAL + Adv",
            ModelVariant::ChannelAttSoftmax => "Channel Att + softmax + CAL",
        };
        if ma > 0.0 {
            format!("{base} + MA={ma}")
        } else {
            base.to_string()
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Architecture and loss knobs shared by every variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub reduction: usize,
    pub spatial_kernel: usize,
    pub embedding_dim: usize,
    pub arcface: ArcfaceConfig,
    pub oni: OniConfig,
    pub w_mask: f64,
    pub w_adv: f64,
    pub grl_lambda: f64,
}

/// Arcface scale used for desk-scale training. At 40 classes and toy width,
/// s = 64 folds every class weight onto one axis within the first epochs.
pub const DESK_ARCFACE_SCALE: f64 = 30.0;

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            widths: vec![16, 32, 64, 128],
            strides: vec![2, 2, 2, 1],
            reduction: 4,
            spatial_kernel: 7,
            embedding_dim: 128,
            arcface: ArcfaceConfig::new(DESK_ARCFACE_SCALE, 0.5),
            oni: OniConfig::default(),
            w_mask: 1.0,
            w_adv: 1.0,
            grl_lambda: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub image_size: usize,
    pub num_classes: usize,
    pub arch: ArchConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: ModelVariant::MfsaCal,
            image_size: 32,
            num_classes: 40,
            arch: ArchConfig::default(),
        }
    }
}

/// Smallest spatial extent the final feature map may have.
pub const MIN_FEATURE_EXTENT: usize = 4;

impl ModelConfig {
    /// Spatial extent of the backbone output.
    pub fn feature_extent(&self) -> usize {
        self.arch
            .strides
            .iter()
            .fold(self.image_size, |s, &st| if st == 0 { s } else { (s - 1) / st + 1 })
    }

    pub fn feature_channels(&self) -> usize {
        self.arch.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if a.widths.is_empty() || a.widths.len() != a.strides.len() {
            return Err(Error::Config("widths and strides must be non-empty and of equal length".into()));
        }
        if a.widths.contains(&0) || a.strides.contains(&0) || self.image_size == 0 {
            return Err(Error::Config("widths, strides and image_size must be positive".into()));
        }
        if self.feature_extent() < MIN_FEATURE_EXTENT {
            return Err(Error::Config(format!(
                "final feature map is {0}x{0}; attention needs at least {MIN_FEATURE_EXTENT}x{MIN_FEATURE_EXTENT}",
                self.feature_extent()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "arcface needs at least 2 identities, got {}",
                self.num_classes
            )));
        }
        if a.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        for (name, w) in [("w_mask", a.w_mask), ("w_adv", a.w_adv), ("grl_lambda", a.grl_lambda)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {w}")));
            }
        }
        a.arcface.validate()?;
        a.oni.validate()
    }
}

#[derive(Clone, Debug)]
enum Attention {
    None,
    Cbam(CbamBlock),
    Mfsa(MfsaBlock),
    ChannelSoftmax(CbamBlock),
}

/// A training batch. `images` is `[N, 3, H, W]`.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub mask_flags: Vec<bool>,
}

impl<T> Batch<T> {
    pub fn mask_labels(&self) -> Vec<usize> {
        self.mask_flags.iter().map(|&m| m as usize).collect()
    }
}

/// Graph nodes of one training forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub total: NodeId,
    pub arc: NodeId,
    pub mask: Option<NodeId>,
    pub adv: Option<NodeId>,
    pub mask_logits: Option<NodeId>,
    pub adv_logits: Option<NodeId>,
    pub feature: NodeId,
    pub recognition: NodeId,
    pub embedding: NodeId,
    pub attention: Option<AttentionNodes>,
}

/// Scalar outcome of one optimization step's forward/backward.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub arc: f64,
    pub mask: Option<f64>,
    pub adv: Option<f64>,
    /// Correct mask-usage predictions of the complementary (or, failing
    /// that, adversarial) head.
    pub mask_correct: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    backbone: Vec<(Conv2d, BatchNorm2d)>,
    attention: Attention,
    embed: Linear,
    embed_bn: BatchNorm2d,
    arcface_weight: ParamId,
    mask_head: Option<Linear>,
    adv_head: Option<Linear>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut backbone = Vec::new();
        let mut in_c = 3;
        for (i, (&w, &s)) in config.arch.widths.iter().zip(&config.arch.strides).enumerate() {
            let conv = Conv2d::new(
                &mut store,
                &mut rng,
                &format!("backbone.{i}.conv"),
                ConvSpec {
                    in_channels: in_c,
                    out_channels: w,
                    kernel: 3,
                    stride: s,
                    bias: false,
                    orthogonal: false,
                },
            )?;
            let bn = BatchNorm2d::new(&mut store, &format!("backbone.{i}.bn"), w)?;
            backbone.push((conv, bn));
            in_c = w;
        }
        let c = config.feature_channels();
        let attention = match config.variant.attention() {
            AttentionKind::None => Attention::None,
            AttentionKind::Cbam => Attention::Cbam(CbamBlock::new(
                &mut store,
                &mut rng,
                "attention",
                c,
                config.arch.reduction,
                config.arch.spatial_kernel,
                1,
            )?),
            AttentionKind::ChannelSoftmax => Attention::ChannelSoftmax(CbamBlock::new(
                &mut store,
                &mut rng,
                "attention",
                c,
                config.arch.reduction,
                config.arch.spatial_kernel,
                FOCAL_MAPS,
            )?),
            AttentionKind::Mfsa => Attention::Mfsa(MfsaBlock::new(
                &mut store,
                &mut rng,
                "attention",
                c,
                config.arch.reduction,
            )?),
        };
        let emb = config.arch.embedding_dim;
        let embed = Linear::new(&mut store, &mut rng, "embed", c, emb, false)?;
        let embed_bn = BatchNorm2d::new(&mut store, "embed.bn", emb)?;
        let arcface_weight = nn::normal_param(
            &mut store,
            &mut rng,
            "arcface.weight",
            &[emb, config.num_classes],
            1.0 / (emb as f64).sqrt(),
        )?;
        let mask_head = config
            .variant
            .has_mask_head()
            .then(|| Linear::new(&mut store, &mut rng, "mask_head", c, 2, true))
            .transpose()?;
        let adv_head = config
            .variant
            .has_adv_head()
            .then(|| Linear::new(&mut store, &mut rng, "adv_head", c, 2, true))
            .transpose()?;
        Ok(Model {
            config,
            store,
            backbone,
            attention,
            embed,
            embed_bn,
            arcface_weight,
            mask_head,
            adv_head,
        })
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn arcface_weight(&self) -> ParamId {
        self.arcface_weight
    }

    pub fn forward_context(&self, mode: Mode) -> Forward<'_, T> {
        Forward::new(&self.store, mode, self.config.arch.oni)
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.config.image_size || w != self.config.image_size {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: vec![3, self.config.image_size, self.config.image_size],
                rhs: images.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Final backbone feature `[N, C_f, H_f, W_f]`.
    pub fn backbone_forward(&self, fw: &mut Forward<'_, T>, images: NodeId) -> Result<NodeId> {
        let mut x = images;
        for (conv, bn) in &self.backbone {
            x = conv.forward(fw, x)?;
            x = bn.forward(fw, x)?;
            x = fw.graph.relu(x)?;
        }
        Ok(x)
    }

    pub fn attention_forward(
        &self,
        fw: &mut Forward<'_, T>,
        feature: NodeId,
    ) -> Result<Option<AttentionNodes>> {
        Ok(match &self.attention {
            Attention::None => None,
            Attention::Cbam(block) => Some(block.forward_cal(fw, feature)?),
            Attention::ChannelSoftmax(block) => Some(block.forward_softmax(fw, feature)?),
            Attention::Mfsa(block) => Some(block.forward(fw, feature)?),
        })
    }

    fn pooled(&self, fw: &mut Forward<'_, T>, x: NodeId) -> Result<NodeId> {
        let p = fw.graph.pool_spatial(x, PoolMode::Avg)?;
        fw.graph.flatten(p)
    }

    /// Embedding of a recognition feature: average pool, linear, then
    /// batch normalization over the embedding dimensions.
    pub fn embed_feature(&self, fw: &mut Forward<'_, T>, recognition: NodeId) -> Result<NodeId> {
        let p = self.pooled(fw, recognition)?;
        let z = self.embed.forward(fw, p)?;
        let (n, e) = (fw.graph.shape(z)[0], fw.graph.shape(z)[1]);
        let z = fw.graph.reshape(z, &[n, e, 1, 1])?;
        let z = self.embed_bn.forward(fw, z)?;
        fw.graph.reshape(z, &[n, e])
    }

    /// Logits of the adversarial head for a feature, through gradient
    /// reversal when `reverse` is set.
    pub fn adv_logits(&self, fw: &mut Forward<'_, T>, feature: NodeId, reverse: bool) -> Result<NodeId> {
        let head = self
            .adv_head
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("variant {} has no adversarial head", self.variant())))?;
        let x = if reverse {
            fw.graph.grad_reverse(feature, self.config.arch.grl_lambda)?
        } else {
            feature
        };
        let p = self.pooled(fw, x)?;
        head.forward(fw, p)
    }

    /// Records the full training objective for `batch` in `fw`.
    pub fn forward_train(&self, fw: &mut Forward<'_, T>, batch: &Batch<T>) -> Result<ForwardNodes> {
        self.check_images(&batch.images)?;
        let n = batch.images.shape()[0];
        if batch.labels.len() != n || batch.mask_flags.len() != n {
            return Err(Error::invalid(format!(
                "batch of {n} images has {} labels and {} mask flags",
                batch.labels.len(),
                batch.mask_flags.len()
            )));
        }
        let images = fw.graph.input(batch.images.clone())?;
        let feature = self.backbone_forward(fw, images)?;
        let attention = self.attention_forward(fw, feature)?;
        let recognition = attention.as_ref().map_or(feature, |a| a.x_um);
        let embedding = self.embed_feature(fw, recognition)?;
        let w = fw.param(self.arcface_weight)?;
        let arc = fw.graph.arcface(
            embedding,
            w,
            &batch.labels,
            &self.config.arch.arcface,
        )?;
        let mask_targets = batch.mask_labels();
        let mut total = arc;

        let (mut mask, mut mask_logits) = (None, None);
        if let (Some(head), Some(att)) = (&self.mask_head, &attention) {
            let p = self.pooled(fw, att.x_m)?;
            let logits = head.forward(fw, p)?;
            let loss = fw.graph.cross_entropy(logits, &mask_targets)?;
            if self.config.arch.w_mask > 0.0 {
                let weighted = fw.graph.scale(loss, self.config.arch.w_mask)?;
                total = fw.graph.add(total, weighted)?;
            }
            mask = Some(loss);
            mask_logits = Some(logits);
        }

        let (mut adv, mut adv_logits) = (None, None);
        if self.adv_head.is_some() {
            let logits = self.adv_logits(fw, recognition, true)?;
            let loss = fw.graph.cross_entropy(logits, &mask_targets)?;
            if self.config.arch.w_adv > 0.0 {
                let weighted = fw.graph.scale(loss, self.config.arch.w_adv)?;
                total = fw.graph.add(total, weighted)?;
            }
            adv = Some(loss);
            adv_logits = Some(logits);
        }

        Ok(ForwardNodes {
            total,
            arc,
            mask,
            adv,
            mask_logits,
            adv_logits,
            feature,
            recognition,
            embedding,
            attention,
        })
    }

    /// Forward, backward, and gradient write-back for one batch. Running
    /// batch-norm statistics are updated.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<StepLosses> {
        let mut fw = self.forward_context(Mode::Train);
        let nodes = self.forward_train(&mut fw, batch)?;
        let (mut g, stats) = fw.finish();
        g.backward(nodes.total)?;
        g.write_param_grads(&mut self.store);
        stats.apply(&mut self.store);
        let value = |n: NodeId| g.value(n).item().f64();
        let mask_correct = nodes
            .mask_logits
            .or(nodes.adv_logits)
            .map(|l| count_correct(g.value(l), &batch.mask_flags));
        Ok(StepLosses {
            total: value(nodes.total),
            arc: value(nodes.arc),
            mask: nodes.mask.map(value),
            adv: nodes.adv.map(value),
            mask_correct,
        })
    }

    /// Eval-mode embeddings `[N, C_emb]`.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let mut fw = self.forward_context(Mode::Eval);
        let x = fw.graph.input(images.clone())?;
        let feature = self.backbone_forward(&mut fw, x)?;
        let recognition = self
            .attention_forward(&mut fw, feature)?
            .map_or(feature, |a| a.x_um);
        let e = self.embed_feature(&mut fw, recognition)?;
        Ok(fw.graph.value(e).clone())
    }

    /// Eval-mode attention maps, or `None` for variants without attention.
    pub fn attention_maps(&self, images: &Tensor<T>) -> Result<Option<AttentionOutputs<T>>> {
        self.check_images(images)?;
        let mut fw = self.forward_context(Mode::Eval);
        let x = fw.graph.input(images.clone())?;
        let feature = self.backbone_forward(&mut fw, x)?;
        Ok(self
            .attention_forward(&mut fw, feature)?
            .map(|a| a.materialize(&fw.graph)))
    }
}

fn count_correct<T: Real>(logits: &Tensor<T>, flags: &[bool]) -> usize {
    logits
        .data()
        .chunks(2)
        .zip(flags)
        .filter(|(row, &flag)| (row[1] > row[0]) == flag)
        .count()
}
