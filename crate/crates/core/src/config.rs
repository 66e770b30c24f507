//! Run configuration: a TOML document with dotted keys, validated against
//! every module's preconditions before anything runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detection::{DecodeConfig, HeadMode};
use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::eval::EvalProtocol;
use crate::tcm::TcmConfig;

pub const SEED_ENV: &str = "TALLKIT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcmSection {
    pub layers: usize,
    pub droppath: f64,
    pub heads: usize,
    pub droppath_uniform: bool,
    pub ffn_expansion: usize,
    /// 0 selects `tokens - 1`.
    pub max_relative_distance: usize,
}

impl Default for TcmSection {
    fn default() -> Self {
        TcmSection {
            layers: 3,
            droppath: 0.1,
            heads: 4,
            droppath_uniform: false,
            ffn_expansion: 4,
            max_relative_distance: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub mode: HeadMode,
    /// Anchor lengths as multiples of each level's stride.
    pub anchors: Vec<f64>,
    pub levels: usize,
    pub channels: usize,
    pub depth: usize,
    pub nms_iou: f64,
    pub score_thresh: f64,
    pub max_dets: usize,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection {
            mode: HeadMode::PerSegmentClass,
            anchors: vec![1.0, 1.5, 2.0],
            levels: 4,
            channels: 64,
            depth: 2,
            nms_iou: 0.5,
            score_thresh: 0.05,
            max_dets: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub encoder_lr_mult: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Videos per optimizer step.
    pub batch: usize,
    /// Backpropagate video by video and sum gradients.
    pub accumulate: bool,
    pub cosine: bool,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            lr: 1e-3,
            encoder_lr_mult: 0.1,
            weight_decay: 1e-4,
            epochs: 30,
            batch: 1,
            accumulate: false,
            cosine: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data: PathBuf,
    pub memory: PathBuf,
    pub out: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data: "data".into(),
            memory: "memory".into(),
            out: "runs/default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `thumos` (0.3:0.1:0.7) or `activitynet` (0.5:0.05:0.95).
    pub protocol: String,
    /// Evaluate on the eval split every this many epochs (0: only at the end).
    pub every: usize,
    pub pr_plots: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            protocol: "thumos".into(),
            every: 0,
            pr_plots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Frame budget `T_cfg`.
    pub t_cfg: usize,
    /// Clip length `L_c`.
    pub clip_len: usize,
    /// Clip sampling rate `r`.
    pub sample_rate: f64,
    /// Feature channels `C_f`.
    pub feature_channels: usize,
    /// Width of the toy backbone's hidden layer.
    pub encoder_hidden: usize,
    pub freeze_encoder: bool,
    pub cache_post_reducer: bool,
    /// Brightness jitter amplitude; 0 disables augmentation.
    pub augment_jitter: f64,
    pub tcm: TcmSection,
    pub head: HeadSection,
    pub optim: OptimSection,
    pub paths: PathsSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            t_cfg: 128,
            clip_len: 16,
            sample_rate: 1.0,
            feature_channels: 32,
            encoder_hidden: 16,
            freeze_encoder: false,
            cache_post_reducer: false,
            augment_jitter: 0.1,
            tcm: TcmSection::default(),
            head: HeadSection::default(),
            optim: OptimSection::default(),
            paths: PathsSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

impl RunConfig {
    /// Parses and validates; does not consult the environment.
    pub fn from_toml(text: &str, source: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let loc = match e.span() {
                Some(span) => {
                    let (l, c) = line_col(text, span.start);
                    format!("{source}:{l}:{c}")
                }
                None => source.to_string(),
            };
            Error::parse(loc, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the `TALLKIT_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn num_clips(&self) -> usize {
        self.t_cfg / self.clip_len
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        let mut spec = EncoderSpec::toy(self.clip_len, self.feature_channels);
        spec.hidden = self.encoder_hidden;
        spec.trainable = !self.freeze_encoder;
        spec
    }

    pub fn num_tokens(&self) -> usize {
        self.num_clips() * self.encoder_spec().feature_len()
    }

    pub fn tcm_config(&self) -> TcmConfig {
        let mut c = TcmConfig::new(self.num_tokens());
        c.num_layers = self.tcm.layers;
        c.heads = self.tcm.heads;
        c.droppath_rate = self.tcm.droppath;
        c.droppath_uniform = self.tcm.droppath_uniform;
        c.ffn_expansion = self.tcm.ffn_expansion;
        if self.tcm.max_relative_distance > 0 {
            c.max_relative_distance = self.tcm.max_relative_distance;
        }
        c
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            score_thresh: self.head.score_thresh,
            nms_iou: self.head.nms_iou,
            max_dets: self.head.max_dets,
            mode: self.head.mode,
        }
    }

    pub fn protocol(&self) -> Result<EvalProtocol> {
        match self.eval.protocol.as_str() {
            "thumos" => Ok(EvalProtocol::thumos()),
            "activitynet" => Ok(EvalProtocol::activitynet()),
            other => Err(Error::InvalidConfig(format!(
                "eval.protocol `{other}` is not one of thumos, activitynet"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 || self.t_cfg == 0 || !self.t_cfg.is_multiple_of(self.clip_len) {
            return Err(Error::InvalidConfig(format!(
                "t_cfg {} must be a positive multiple of clip_len {}",
                self.t_cfg, self.clip_len
            )));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!("sample_rate {} must be in (0, 1]", self.sample_rate)));
        }
        if !(0.0..1.0).contains(&self.augment_jitter) {
            return Err(Error::InvalidConfig(format!("augment_jitter {} must be in [0, 1)", self.augment_jitter)));
        }
        self.encoder_spec().validate()?;
        self.tcm_config().validate(self.feature_channels)?;
        let h = &self.head;
        if h.levels == 0 || h.channels == 0 || h.depth == 0 {
            return Err(Error::InvalidConfig("head.levels, head.channels and head.depth must be positive".into()));
        }
        if self.num_tokens() < 1 << (h.levels - 1) {
            return Err(Error::InvalidConfig(format!(
                "{} tokens cannot feed a {}-level pyramid",
                self.num_tokens(),
                h.levels
            )));
        }
        if h.anchors.is_empty() || h.anchors.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("head.anchors must be positive scales".into()));
        }
        self.decode_config().validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(o.encoder_lr_mult >= 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("optim.lr must be positive; multipliers and decay non-negative".into()));
        }
        if o.epochs == 0 || o.batch == 0 {
            return Err(Error::InvalidConfig("optim.epochs and optim.batch must be positive".into()));
        }
        self.protocol()?.validate()
    }
}
