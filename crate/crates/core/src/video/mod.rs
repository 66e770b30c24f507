//! Video ingestion, clip partitioning, and clip-index sampling.

mod annotations;
mod raw;
mod synth;

pub use annotations::{load_annotations, write_annotations, AnnotationSet, VideoRecord};
pub use raw::{read_video_file, write_video_file, VIDEO_MAGIC};
pub use synth::{generate_synthetic_dataset, render_action_frame, synthetic_dataset, SynthConfig};

use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthAction {
    /// Seconds.
    pub start: f64,
    /// Seconds.
    pub end: f64,
    pub label: usize,
}

/// An untrimmed video with its frames held in memory as `[T, H, W, 3]`
/// row-major `f32` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedVideo {
    pub video_id: String,
    pub frames: Vec<f32>,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub actions: Vec<GroundTruthAction>,
}

impl AnnotatedVideo {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn duration(&self) -> f64 {
        self.num_frames as f64 / self.fps
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let id = &self.video_id;
        if self.num_frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Contract(format!("video `{id}` has an empty dimension")));
        }
        if self.frames.len() != self.num_frames * self.frame_len() {
            return Err(Error::Contract(format!(
                "video `{id}`: {} values for shape [{}, {}, {}, 3]",
                self.frames.len(),
                self.num_frames,
                self.height,
                self.width
            )));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Contract(format!("video `{id}`: fps must be positive")));
        }
        if let Some(i) = self.frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("video `{id}`: non-finite pixel at {i}")));
        }
        let duration = self.duration();
        for (i, a) in self.actions.iter().enumerate() {
            if !(0.0 <= a.start && a.start < a.end && a.end <= duration + 1e-9) {
                return Err(Error::Contract(format!(
                    "video `{id}` action {i}: [{}, {}] outside [0, {duration}]",
                    a.start, a.end
                )));
            }
            if a.label >= num_classes {
                return Err(Error::Contract(format!(
                    "video `{id}` action {i}: label {} >= {num_classes}",
                    a.label
                )));
            }
        }
        Ok(())
    }
}

/// A video's division into contiguous non-overlapping clips for one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipPartition {
    pub shift: usize,
    pub clip_len: usize,
    pub num_clips: usize,
    /// Original frame index of budget position 0 (center truncation offset).
    pub budget_offset: usize,
    pub sampled_idx: Vec<usize>,
    pub remaining_idx: Vec<usize>,
}

impl ClipPartition {
    /// Original-video frame index that sequence position 0 maps to.
    pub fn origin_frame(&self) -> f64 {
        (self.budget_offset + self.shift) as f64
    }

    pub fn sequence_frames(&self) -> usize {
        self.num_clips * self.clip_len
    }

    pub fn with_sampling(mut self, sampled: Vec<usize>, remaining: Vec<usize>) -> Result<Self> {
        check_split(self.num_clips, &sampled, &remaining)?;
        self.sampled_idx = sampled;
        self.remaining_idx = remaining;
        Ok(self)
    }
}

pub(crate) fn check_split(num_clips: usize, sampled: &[usize], remaining: &[usize]) -> Result<()> {
    if sampled.len() + remaining.len() != num_clips {
        return Err(Error::Contract(format!(
            "|I| + |I'| = {} + {} != N_c = {num_clips}",
            sampled.len(),
            remaining.len()
        )));
    }
    let mut seen = vec![false; num_clips];
    for &i in sampled.iter().chain(remaining) {
        if i >= num_clips {
            return Err(Error::Contract(format!("clip index {i} out of range [0, {num_clips})")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Contract(format!("clip index {i} appears twice")));
        }
    }
    Ok(())
}

/// Clip pixels stored as `[N_c, L_c, H, W, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipArray {
    pub data: Vec<f32>,
    pub num_clips: usize,
    pub clip_len: usize,
    pub height: usize,
    pub width: usize,
}

impl ClipArray {
    pub fn clip_size(&self) -> usize {
        self.clip_len * self.height * self.width * 3
    }

    pub fn clip(&self, m: usize) -> &[f32] {
        let n = self.clip_size();
        &self.data[m * n..(m + 1) * n]
    }

    pub fn clip_mut(&mut self, m: usize) -> &mut [f32] {
        let n = self.clip_size();
        &mut self.data[m * n..(m + 1) * n]
    }

    /// Gathers the listed clips, in order, into a contiguous buffer.
    pub fn gather(&self, idx: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(idx.len() * self.clip_size());
        for &m in idx {
            out.extend_from_slice(self.clip(m));
        }
        out
    }
}

/// Maps a budget position to the original frame it is read from: long
/// videos are center-truncated and short ones edge-replicated.
fn budget_source(num_frames: usize, budget: usize, pos: usize) -> (usize, usize) {
    let offset = num_frames.saturating_sub(budget) / 2;
    let pos = pos.min(budget - 1);
    ((offset + pos).min(num_frames - 1), offset)
}

/// Splits a video (normalized to `frame_budget` frames) into
/// `frame_budget / clip_len` clips starting at `shift`. Frames past the
/// budget are filled by replicating the last budget frame.
pub fn partition_video(
    video: &AnnotatedVideo,
    frame_budget: usize,
    clip_len: usize,
    shift: usize,
) -> Result<(ClipPartition, ClipArray)> {
    if clip_len == 0 || clip_len > frame_budget {
        return Err(Error::InvalidConfig(format!(
            "clip length {clip_len} must be in [1, {frame_budget}]"
        )));
    }
    if !frame_budget.is_multiple_of(clip_len) {
        return Err(Error::InvalidConfig(format!(
            "frame budget {frame_budget} is not a multiple of clip length {clip_len}"
        )));
    }
    if shift >= clip_len {
        return Err(Error::InvalidConfig(format!("shift {shift} must be < clip length {clip_len}")));
    }
    if video.num_frames == 0 {
        return Err(Error::Contract(format!("video `{}` has no frames", video.video_id)));
    }
    let num_clips = frame_budget / clip_len;
    let frame_len = video.frame_len();
    let mut data = Vec::with_capacity(num_clips * clip_len * frame_len);
    let mut budget_offset = 0;
    for m in 0..num_clips {
        for t in 0..clip_len {
            let (src, off) = budget_source(video.num_frames, frame_budget, shift + m * clip_len + t);
            budget_offset = off;
            data.extend_from_slice(video.frame(src));
        }
    }
    let partition = ClipPartition {
        shift,
        clip_len,
        num_clips,
        budget_offset,
        sampled_idx: (0..num_clips).collect(),
        remaining_idx: Vec::new(),
    };
    let clips = ClipArray {
        data,
        num_clips,
        clip_len,
        height: video.height,
        width: video.width,
    };
    Ok((partition, clips))
}

/// Number of clips encoded online at rate `rate`: `clamp(round(r * N_c), 1, N_c)`.
pub fn num_sampled(num_clips: usize, rate: f64) -> usize {
    ((rate * num_clips as f64).round() as usize).clamp(1, num_clips.max(1))
}

/// Draws the online clip set `I` uniformly without replacement and returns
/// `(I, I')`, both sorted ascending.
pub fn sample_clip_indices<R: Rng + ?Sized>(
    num_clips: usize,
    rate: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidConfig(format!("sampling rate {rate} must be in (0, 1]")));
    }
    if num_clips == 0 {
        return Err(Error::InvalidConfig("cannot sample from zero clips".into()));
    }
    let n_s = num_sampled(num_clips, rate);
    let mut sampled = index::sample(rng, num_clips, n_s).into_vec();
    sampled.sort_unstable();
    let mut in_sample = vec![false; num_clips];
    for &i in &sampled {
        in_sample[i] = true;
    }
    let remaining = (0..num_clips).filter(|&i| !in_sample[i]).collect();
    Ok((sampled, remaining))
}

/// Per-video augmentation, applied identically to every clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub hflip: bool,
    pub brightness: f32,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        hflip: false,
        brightness: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, jitter: f32) -> Self {
        Augmentation {
            hflip: rng.random_bool(0.5),
            brightness: 1.0 + rng.random_range(-jitter..=jitter),
        }
    }

    pub fn apply(&self, clips: &mut ClipArray) {
        if *self == Self::IDENTITY {
            return;
        }
        let (h, w) = (clips.height, clips.width);
        let frames = clips.data.len() / (h * w * 3);
        for f in 0..frames {
            let frame = &mut clips.data[f * h * w * 3..(f + 1) * h * w * 3];
            if self.hflip {
                for row in frame.chunks_exact_mut(w * 3) {
                    for x in 0..w / 2 {
                        for c in 0..3 {
                            row.swap(x * 3 + c, (w - 1 - x) * 3 + c);
                        }
                    }
                }
            }
            if self.brightness != 1.0 {
                for v in frame.iter_mut() {
                    *v = (*v * self.brightness).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// A labelled collection of videos split into train and eval subsets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub labels: Vec<String>,
    pub train: Vec<AnnotatedVideo>,
    pub eval: Vec<AnnotatedVideo>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Loads `<dir>/annotations.json` and the raw `<dir>/videos/<id>.tkvd`
    /// files it references. Videos without a subset go to both splits.
    pub fn load(dir: &Path) -> Result<Self> {
        let set = load_annotations(&dir.join("annotations.json"))?;
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for rec in &set.records {
            let path = dir.join("videos").join(format!("{}.tkvd", rec.video_id));
            let (num_frames, height, width, frames) = read_video_file(&path)?;
            let video = AnnotatedVideo {
                video_id: rec.video_id.clone(),
                frames,
                num_frames,
                height,
                width,
                fps: rec.fps,
                actions: rec.actions.clone(),
            };
            video.validate(set.labels.len())?;
            match rec.subset.as_deref() {
                Some("train") => train.push(video),
                Some("eval") | Some("test") | Some("validation") => eval.push(video),
                _ => {
                    train.push(video.clone());
                    eval.push(video);
                }
            }
        }
        Ok(Dataset {
            labels: set.labels,
            train,
            eval,
        })
    }

    /// Writes the dataset in the layout read by [`Dataset::load`].
    pub fn save(&self, dir: &Path) -> Result<()> {
        let vdir = dir.join("videos");
        std::fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        let mut records = Vec::new();
        for (subset, videos) in [("train", &self.train), ("eval", &self.eval)] {
            for v in videos {
                write_video_file(
                    &vdir.join(format!("{}.tkvd", v.video_id)),
                    v.num_frames,
                    v.height,
                    v.width,
                    &v.frames,
                )?;
                records.push(VideoRecord {
                    video_id: v.video_id.clone(),
                    duration: v.duration(),
                    fps: v.fps,
                    subset: Some(subset.to_string()),
                    actions: v.actions.clone(),
                });
            }
        }
        write_annotations(
            &dir.join("annotations.json"),
            &AnnotationSet {
                labels: self.labels.clone(),
                records,
            },
        )
    }
}
