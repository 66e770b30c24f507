//! Feature pyramid, anchor head, video-level classifier, decoding and NMS.

pub mod anchors;
pub mod fpn;
pub mod nms;

use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{cpu, dropout_mask, Conv1d, GroupNorm, Linear, Padding, ParamStore};

pub use anchors::{assign_targets, decode, encode, Anchor, AnchorLabel, AnchorSet, AnchorTarget, FrameSegment};
pub use fpn::{FeaturePyramid, PyramidFeatures};
pub use nms::{decode_and_nms, nms, Candidate, DecodeConfig, DecodeContext};

/// A detected action in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionInstance {
    pub start: f64,
    pub end: f64,
    pub label: usize,
    pub score: f64,
}

/// Where a detection's class comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One sigmoid per class per anchor.
    PerSegmentClass,
    /// A single actionness channel per anchor; the label comes from the
    /// video-level classifier.
    VideoLevelClass,
}

impl HeadMode {
    pub fn class_channels(self, num_classes: usize) -> usize {
        match self {
            HeadMode::PerSegmentClass => num_classes,
            HeadMode::VideoLevelClass => 1,
        }
    }
}

/// Focal-loss prior: initial foreground probability 0.01.
pub const CLASS_BIAS_PRIOR: f32 = -4.595_12;

/// Group count for the head towers: the largest of 8, 4, 2, 1 dividing
/// `channels`.
pub fn head_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// One tower layer: convolution, group norm, ReLU.
#[derive(Debug, Clone)]
pub struct TowerLayer {
    pub conv: Conv1d,
    pub norm: GroupNorm,
}

/// Classification and regression branches shared across pyramid levels.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub cls_convs: Vec<TowerLayer>,
    pub reg_convs: Vec<TowerLayer>,
    pub cls_out: Conv1d,
    pub reg_out: Conv1d,
    pub anchors_per_position: usize,
    pub class_channels: usize,
}

impl DetectionHead {
    pub const PREFIX: &'static str = "head.";

    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        class_channels: usize,
        anchors_per_position: usize,
        depth: usize,
    ) -> Result<Self> {
        let conv = |store: &mut ParamStore, name: String, out: usize| {
            Conv1d::new(store, &name, channels, out, 3, 1, Padding::Zeros(1))
        };
        let tower = |store: &mut ParamStore, name: String| -> Result<TowerLayer> {
            Ok(TowerLayer {
                conv: Conv1d::he(store, &name, channels, channels, 3, 1, Padding::Zeros(1))?,
                norm: GroupNorm::new(store, &format!("{name}.norm"), channels, head_groups(channels))?,
            })
        };
        let cls_convs = (0..depth).map(|i| tower(store, format!("head.cls{i}"))).collect::<Result<_>>()?;
        let reg_convs = (0..depth).map(|i| tower(store, format!("head.reg{i}"))).collect::<Result<_>>()?;
        let cls_out = conv(store, "head.cls_out".into(), anchors_per_position * class_channels)?;
        let reg_out = conv(store, "head.reg_out".into(), anchors_per_position * 2)?;
        store.set("head.cls_out.bias", &vec![CLASS_BIAS_PRIOR; anchors_per_position * class_channels])?;
        Ok(DetectionHead {
            cls_convs,
            reg_convs,
            cls_out,
            reg_out,
            anchors_per_position,
            class_channels,
        })
    }

    fn branch(convs: &[TowerLayer], out: &Conv1d, level: &Tensor, per_anchor: usize) -> Result<Tensor> {
        let t = level.dim(0)?;
        let mut x = level.t()?.unsqueeze(0)?;
        for layer in convs {
            x = layer.norm.forward(&layer.conv.forward(&x)?)?.relu()?;
        }
        let y = out.forward(&x)?.squeeze(0)?.t()?.contiguous()?;
        Ok(y.reshape((t * y.dim(1)? / per_anchor, per_anchor))?)
    }

    /// Returns `(class logits [A, K'], offsets [A, 2])`, anchors in
    /// [`AnchorSet`] order.
    pub fn forward(&self, pyramid: &PyramidFeatures, anchors: &AnchorSet) -> Result<(Tensor, Tensor)> {
        let lengths = pyramid.lengths()?;
        if lengths != anchors.level_lengths || anchors.per_position() != self.anchors_per_position {
            return Err(Error::Contract(format!(
                "anchor set {:?} x {} does not match pyramid {:?} x {}",
                anchors.level_lengths,
                anchors.per_position(),
                lengths,
                self.anchors_per_position
            )));
        }
        let mut cls = Vec::new();
        let mut reg = Vec::new();
        for level in &pyramid.levels {
            cls.push(Self::branch(&self.cls_convs, &self.cls_out, level, self.class_channels)?);
            reg.push(Self::branch(&self.reg_convs, &self.reg_out, level, 2)?);
        }
        Ok((Tensor::cat(&cls, 0)?, Tensor::cat(&reg, 0)?))
    }
}

pub const VIDEO_DROPOUT: f64 = 0.5;

/// Mean-pool, dropout (training only), linear.
#[derive(Debug, Clone)]
pub struct VideoClassifier {
    pub linear: Linear,
}

impl VideoClassifier {
    pub const PREFIX: &'static str = "video_cls.";

    pub fn new(store: &mut ParamStore, channels: usize, num_classes: usize) -> Result<Self> {
        Ok(VideoClassifier {
            linear: Linear::new(store, "video_cls", channels, num_classes)?,
        })
    }

    /// `tokens: [n, C]`; `rng` present means train mode.
    pub fn forward(&self, tokens: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let mut pooled = tokens.mean_keepdim(0)?;
        if let Some(rng) = rng {
            let c = pooled.dim(D::Minus1)?;
            let mask = Tensor::from_vec(dropout_mask(rng, c, VIDEO_DROPOUT), (1, c), &cpu())?;
            pooled = (pooled * mask)?;
        }
        Ok(self.linear.forward(&pooled)?.squeeze(0)?)
    }
}
