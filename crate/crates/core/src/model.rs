//! The full detector and its per-video forward passes.
//!
//! Training step for one video: partition (fresh shift) -> sample `I`,
//! `I'` -> encode `I` online -> fetch `I'` from memory -> write the
//! gradient-stopped fresh features back at `I` -> assemble in clip order ->
//! temporal reduction -> TCM -> pyramid and head -> losses.

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::detection::{
    assign_targets, decode_and_nms, ActionInstance, AnchorLabel, AnchorSet, AnchorTarget, DecodeContext,
    DetectionHead, FeaturePyramid, FrameSegment, HeadMode, VideoClassifier,
};
use crate::encoder::{build_toy_encoder, clips_tensor, ActivationMeter, Encoder, FeatureSource};
use crate::error::{Error, Result};
use crate::losses::{
    diou_loss_tensor, focal_loss_tensor, video_ce_tensor, LossBreakdown, FOCAL_ALPHA, FOCAL_GAMMA,
};
use crate::memory::{assemble_features, FeatureMemory, MemoryLayout};
use crate::nn::{cpu, ParamStore};
use crate::rng::{key_of, stream_rng, Stream};
use crate::tcm::TemporalConsistency;
use crate::video::{partition_video, sample_clip_indices, AnnotatedVideo, Augmentation, ClipArray, ClipPartition};

/// A video normalized to the frame budget, ready for one training step.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub video_id: String,
    pub partition: ClipPartition,
    pub clips: ClipArray,
    /// Ground truth in sequence frames, clipped to the sequence.
    pub gts: Vec<FrameSegment>,
    /// Class with the largest annotated duration.
    pub video_label: Option<usize>,
    pub fps: f64,
    pub duration: f64,
}

/// Per-video random streams and instrumentation for one step.
#[derive(Debug)]
pub struct StepContext {
    pub rate: f64,
    pub sampler: ChaCha8Rng,
    pub droppath: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
    pub meter: ActivationMeter,
    pub trace: Vec<&'static str>,
}

impl StepContext {
    pub fn new(seed: u64, epoch: u64, step: u64, video_id: &str, rate: f64) -> Self {
        let coords = [epoch, step, key_of(video_id)];
        StepContext {
            rate,
            sampler: stream_rng(seed, Stream::Sampler, &coords),
            droppath: stream_rng(seed, Stream::DropPath, &coords),
            dropout: stream_rng(seed, Stream::Dropout, &coords),
            meter: ActivationMeter::new(true),
            trace: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub loss: Tensor,
    pub breakdown: LossBreakdown,
    pub partition: ClipPartition,
}

/// Tokens before and after the TCM with their provenance.
#[derive(Debug, Clone)]
pub struct TokenTrace {
    pub pre_tcm: Tensor,
    pub post_tcm: Tensor,
    pub sources: Vec<FeatureSource>,
}

/// Head outputs for one video in eval mode.
#[derive(Debug, Clone)]
pub struct EvalOutputs {
    pub cls_logits: Vec<Vec<f64>>,
    pub offsets: Vec<[f64; 2]>,
    pub video_logits: Option<Vec<f64>>,
    pub context: DecodeContext,
}

pub fn pyramid_lengths(tokens: usize, levels: usize) -> Vec<usize> {
    let mut out = vec![tokens];
    for _ in 1..levels {
        let last = *out.last().unwrap();
        out.push(last.div_ceil(2));
    }
    out
}

pub struct Model {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub tcm: TemporalConsistency,
    pub fpn: FeaturePyramid,
    pub head: DetectionHead,
    pub video_cls: Option<VideoClassifier>,
    pub anchors: AnchorSet,
    pub num_classes: usize,
    pub mode: HeadMode,
    pub frame_budget: usize,
    pub post_reducer: bool,
    pub augment_jitter: f32,
    pub seed: u64,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("parameters", &self.store.num_scalars())
            .field("num_classes", &self.num_classes)
            .field("mode", &self.mode)
            .finish()
    }
}

impl Model {
    /// Builds every module; initial weights depend only on `cfg.seed`.
    pub fn new(cfg: &RunConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if num_classes == 0 {
            return Err(Error::InvalidConfig("dataset has no classes".into()));
        }
        let mut store = ParamStore::new(cfg.seed);
        let spec = cfg.encoder_spec();
        let encoder = build_toy_encoder(&spec, &mut store)?;
        let tcm = TemporalConsistency::new(&mut store, cfg.feature_channels, &cfg.tcm_config())?;
        let fpn = FeaturePyramid::new(&mut store, cfg.feature_channels, cfg.head.channels, cfg.head.levels)?;
        let head = DetectionHead::new(
            &mut store,
            cfg.head.channels,
            cfg.head.mode.class_channels(num_classes),
            cfg.head.anchors.len(),
            cfg.head.depth,
        )?;
        let video_cls = match cfg.head.mode {
            HeadMode::VideoLevelClass => Some(VideoClassifier::new(&mut store, cfg.feature_channels, num_classes)?),
            HeadMode::PerSegmentClass => None,
        };
        let token_frames = (spec.clip_len / spec.feature_len()) as f64;
        let anchors = AnchorSet::new(
            &pyramid_lengths(cfg.num_tokens(), cfg.head.levels),
            token_frames,
            &cfg.head.anchors,
        );
        Ok(Model {
            store,
            encoder,
            tcm,
            fpn,
            head,
            video_cls,
            anchors,
            num_classes,
            mode: cfg.head.mode,
            frame_budget: cfg.t_cfg,
            post_reducer: cfg.cache_post_reducer,
            augment_jitter: cfg.augment_jitter as f32,
            seed: cfg.seed,
        })
    }

    pub fn memory_layout(&self) -> MemoryLayout {
        MemoryLayout {
            frame_budget: self.frame_budget,
            clip_len: self.encoder.spec.clip_len,
            post_reducer: self.post_reducer,
        }
    }

    pub fn clip_len(&self) -> usize {
        self.encoder.spec.clip_len
    }

    /// True for parameters excluded from optimization.
    pub fn is_frozen(&self, name: &str) -> bool {
        !self.encoder.spec.trainable && name.starts_with(self.encoder.backbone_prefix())
    }

    /// Partition with the epoch's shift and augmentation; sampling happens
    /// in the step itself.
    pub fn prepare_video(&self, video: &AnnotatedVideo, epoch: u64, augment: bool) -> Result<PreparedVideo> {
        let key = key_of(&video.video_id);
        let shift = if augment {
            stream_rng(self.seed, Stream::Shift, &[epoch, key]).random_range(0..self.clip_len())
        } else {
            0
        };
        let (partition, mut clips) = partition_video(video, self.frame_budget, self.clip_len(), shift)?;
        if augment && self.augment_jitter > 0.0 {
            let j = self.augment_jitter;
            let brightness = 1.0 + stream_rng(self.seed, Stream::Augment, &[epoch, key]).random_range(-j..=j);
            Augmentation {
                hflip: false,
                brightness,
            }
            .apply(&mut clips);
        }
        let origin = partition.origin_frame();
        let seq = partition.sequence_frames() as f64;
        let gts = video
            .actions
            .iter()
            .filter_map(|a| {
                let s = (a.start * video.fps - origin).max(0.0);
                let e = (a.end * video.fps - origin).min(seq);
                (e - s > 1e-6).then_some((s, e, a.label))
            })
            .collect();
        let mut per_class = vec![0.0f64; self.num_classes];
        for a in &video.actions {
            per_class[a.label] += a.end - a.start;
        }
        let video_label = per_class
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > 0.0)
            .fold(None, |best: Option<(usize, f64)>, (c, &d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((c, d)),
            })
            .map(|(c, _)| c);
        Ok(PreparedVideo {
            video_id: video.video_id.clone(),
            partition,
            clips,
            gts,
            video_label,
            fps: video.fps,
            duration: video.duration(),
        })
    }

    /// Reduced, flattened tokens `[N_c * L_f, C_f]` from assembled features.
    fn tokens_from(&self, assembled: &Tensor) -> Result<Tensor> {
        let reduced = if self.post_reducer {
            assembled.clone()
        } else {
            self.encoder.reduce(assembled)?
        };
        let (n, l, c) = reduced.dims3()?;
        Ok(reduced.reshape((n * l, c))?)
    }

    fn encode_features(&self, clips: &ClipArray, idx: &[usize], train: bool, meter: &ActivationMeter) -> Result<Tensor> {
        let raw = self.encoder.encode_raw(&clips_tensor(clips, idx)?, train, meter)?;
        if self.post_reducer {
            self.encoder.reduce(&raw)
        } else {
            Ok(raw)
        }
    }

    /// One training forward pass. `memory: None` runs the memory-free
    /// pipeline that encodes every clip online.
    pub fn forward_train(
        &self,
        input: &PreparedVideo,
        memory: Option<&mut FeatureMemory>,
        ctx: &mut StepContext,
    ) -> Result<ForwardOutput> {
        let n_c = input.partition.num_clips;
        let (tokens, partition) = match memory {
            None => {
                let all: Vec<usize> = (0..n_c).collect();
                ctx.trace.push("encode");
                let fresh = self.encode_features(&input.clips, &all, true, &ctx.meter)?;
                ctx.trace.push("reduce");
                (self.tokens_from(&fresh)?, input.partition.clone())
            }
            Some(memory) => {
                if !memory.contains(&input.video_id) {
                    return Err(Error::MemoryUninitialized(input.video_id.clone()));
                }
                ctx.trace.push("sample");
                let (sampled, remaining) = sample_clip_indices(n_c, ctx.rate, &mut ctx.sampler)?;
                let partition = input.partition.clone().with_sampling(sampled, remaining)?;
                ctx.trace.push("encode");
                let fresh = self.encode_features(&input.clips, &partition.sampled_idx, true, &ctx.meter)?;
                ctx.trace.push("fetch");
                let cached = memory.fetch(&input.video_id, &partition.remaining_idx)?;
                ctx.trace.push("update");
                memory.update(&input.video_id, &partition.sampled_idx, &fresh.detach())?;
                ctx.trace.push("assemble");
                let assembled = assemble_features(&fresh, &cached, &partition)?;
                ctx.trace.push("reduce");
                (self.tokens_from(&assembled)?, partition)
            }
        };
        ctx.trace.push("tcm");
        let tokens = self.tcm.forward(&tokens, Some(&mut ctx.droppath))?;
        ctx.trace.push("head");
        let (cls, reg) = self.head.forward(&self.fpn.forward(&tokens)?, &self.anchors)?;
        let video_logits = match &self.video_cls {
            Some(vc) => Some(vc.forward(&tokens, Some(&mut ctx.dropout))?),
            None => None,
        };
        ctx.trace.push("loss");
        let targets = assign_targets(&self.anchors, &input.gts);
        let (loss, breakdown) = self.detection_loss(&cls, &reg, &targets, &input.gts, video_logits.as_ref(), input.video_label)?;
        Ok(ForwardOutput {
            loss,
            breakdown,
            partition,
        })
    }

    /// Focal + DIoU (+ video CE in video-level mode), unit weights.
    pub fn detection_loss(
        &self,
        cls: &Tensor,
        reg: &Tensor,
        targets: &[AnchorTarget],
        gts: &[FrameSegment],
        video_logits: Option<&Tensor>,
        video_label: Option<usize>,
    ) -> Result<(Tensor, LossBreakdown)> {
        let k = cls.dim(1)?;
        let a = targets.len();
        let mut t = vec![0f32; a * k];
        let mut w = vec![1f32; a];
        let mut pos = Vec::new();
        for (i, target) in targets.iter().enumerate() {
            match target.label {
                AnchorLabel::Positive { class, gt } => {
                    let col = if self.mode == HeadMode::PerSegmentClass { class } else { 0 };
                    t[i * k + col] = 1.0;
                    pos.push((i, gt));
                }
                AnchorLabel::Ignore => w[i] = 0.0,
                AnchorLabel::Background => {}
            }
        }
        let t = Tensor::from_vec(t, (a, k), &cpu())?;
        let w = Tensor::from_vec(w, (a, 1), &cpu())?;
        let focal = focal_loss_tensor(cls, &t, &w, pos.len(), FOCAL_ALPHA, FOCAL_GAMMA)?;
        let diou = if pos.is_empty() {
            Tensor::zeros((), DType::F32, &cpu())?
        } else {
            let idx = Tensor::from_vec(pos.iter().map(|&(i, _)| i as u32).collect::<Vec<_>>(), pos.len(), &cpu())?;
            let off = reg.index_select(&idx, 0)?;
            let anchor = |f: &dyn Fn(&crate::detection::Anchor) -> f64| -> Result<Tensor> {
                let v: Vec<f32> = pos.iter().map(|&(i, _)| f(&self.anchors.anchors[i]) as f32).collect();
                Ok(Tensor::from_vec(v, (pos.len(), 1), &cpu())?)
            };
            let (ac, al) = (anchor(&|x| x.center)?, anchor(&|x| x.length)?);
            let center = (ac + off.narrow(1, 0, 1)?.mul(&al)?)?;
            let half = (al.mul(&off.narrow(1, 1, 1)?.exp()?)? * 0.5)?;
            let pred = Tensor::cat(&[(&center - &half)?, (&center + &half)?], 1)?;
            let gt: Vec<f32> = pos.iter().flat_map(|&(_, g)| [gts[g].0 as f32, gts[g].1 as f32]).collect();
            let gt = Tensor::from_vec(gt, (pos.len(), 2), &cpu())?;
            (diou_loss_tensor(&pred, &gt)?.sum_all()? / pos.len() as f64)?
        };
        let ce = match (video_logits, video_label) {
            (Some(logits), Some(label)) => video_ce_tensor(logits, label)?,
            _ => Tensor::zeros((), DType::F32, &cpu())?,
        };
        let total = ((&focal + &diou)? + &ce)?;
        let scalar = |x: &Tensor| -> Result<f64> { Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let breakdown = LossBreakdown::new(scalar(&focal)?, scalar(&diou)?, scalar(&ce)?);
        if !breakdown.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {breakdown:?}")));
        }
        Ok((total, breakdown))
    }

    /// Eval-mode head outputs: every clip encoded online at shift 0. The
    /// feature memory is never consulted.
    pub fn eval_outputs(&self, video: &AnnotatedVideo) -> Result<EvalOutputs> {
        let (partition, clips) = partition_video(video, self.frame_budget, self.clip_len(), 0)?;
        let all: Vec<usize> = (0..partition.num_clips).collect();
        let fresh = self.encode_features(&clips, &all, false, &ActivationMeter::new(false))?;
        let tokens = self.tcm.forward(&self.tokens_from(&fresh)?, None)?;
        let (cls, reg) = self.head.forward(&self.fpn.forward(&tokens)?, &self.anchors)?;
        let video_logits = match &self.video_cls {
            Some(vc) => Some(to_f64_vec(&vc.forward(&tokens, None)?)?),
            None => None,
        };
        Ok(EvalOutputs {
            cls_logits: to_f64_rows(&cls)?,
            offsets: to_f64_rows(&reg)?.into_iter().map(|r| [r[0], r[1]]).collect(),
            video_logits,
            context: DecodeContext {
                origin_frame: partition.origin_frame(),
                fps: video.fps,
                duration: video.duration(),
            },
        })
    }

    pub fn predict(&self, video: &AnnotatedVideo, cfg: &crate::detection::DecodeConfig) -> Result<Vec<ActionInstance>> {
        let out = self.eval_outputs(video)?;
        decode_and_nms(&out.cls_logits, &out.offsets, &self.anchors, &out.context, cfg, out.video_logits.as_deref())
    }

    /// Eval-mode tokens for a split of online and cached clips, without
    /// touching the memory contents.
    pub fn token_trace(
        &self,
        video: &AnnotatedVideo,
        memory: &FeatureMemory,
        rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<TokenTrace> {
        let (partition, clips) = partition_video(video, self.frame_budget, self.clip_len(), 0)?;
        let (sampled, remaining) = sample_clip_indices(partition.num_clips, rate, rng)?;
        let partition = partition.with_sampling(sampled, remaining)?;
        let fresh = self.encode_features(&clips, &partition.sampled_idx, false, &ActivationMeter::new(false))?;
        let cached = memory.fetch(&video.video_id, &partition.remaining_idx)?;
        let pre = self.tokens_from(&assemble_features(&fresh, &cached, &partition)?)?;
        let post = self.tcm.forward(&pre, None)?;
        let per_clip = pre.dim(0)? / partition.num_clips;
        let mut online = vec![false; partition.num_clips];
        for &m in &partition.sampled_idx {
            online[m] = true;
        }
        let sources = (0..pre.dim(0)?)
            .map(|i| if online[i / per_clip] { FeatureSource::Online } else { FeatureSource::Memory })
            .collect();
        Ok(TokenTrace {
            pre_tcm: pre,
            post_tcm: post,
            sources,
        })
    }
}

fn to_f64_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2()?)
}

fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.to_vec1()?)
}
