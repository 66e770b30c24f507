//! Synthetic untrimmed videos with rendered action instances.
//!
//! Each class is a Gaussian blob moving across a toroidal frame in a
//! class-specific direction while its intensity flickers with a
//! class-specific period, tinted toward a class-specific color. Background
//! frames are uniform noise.

use std::f32::consts::TAU;

use rand::Rng;

use super::{AnnotatedVideo, Dataset, GroundTruthAction};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub num_classes: usize,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub min_action_frames: usize,
    pub max_action_frames: usize,
    pub max_actions: usize,
    pub min_gap_frames: usize,
    pub noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_videos: 1,
            num_classes: 3,
            num_frames: 128,
            height: 16,
            width: 16,
            fps: 8.0,
            min_action_frames: 16,
            max_action_frames: 40,
            max_actions: 4,
            min_gap_frames: 4,
            noise: 0.3,
        }
    }
}

fn flicker_period(class: usize) -> f32 {
    3.0 + 2.0 * class as f32
}

/// Adds the pattern of `class` at action-local time `t` onto one
/// `[H, W, 3]` frame.
pub fn render_action_frame(
    class: usize,
    num_classes: usize,
    t: usize,
    height: usize,
    width: usize,
    frame: &mut [f32],
) {
    let t = t as f32;
    let angle = TAU * class as f32 / num_classes.max(1) as f32;
    let (dx, dy) = (angle.cos(), angle.sin());
    let (h, w) = (height as f32, width as f32);
    let cx = (w / 2.0 + dx * t).rem_euclid(w);
    let cy = (h / 2.0 + dy * t).rem_euclid(h);
    let sigma = h.max(w) / 6.0;
    let amp = 0.65 + 0.35 * (TAU * t / flicker_period(class)).sin();
    let mut tint = [0.0f32; 3];
    tint[class % 3] = 1.0;
    for y in 0..height {
        let ddy = {
            let d = (y as f32 - cy).abs();
            d.min(h - d)
        };
        for x in 0..width {
            let ddx = {
                let d = (x as f32 - cx).abs();
                d.min(w - d)
            };
            let g = amp * (-(ddx * ddx + ddy * ddy) / (2.0 * sigma * sigma)).exp();
            let px = &mut frame[(y * width + x) * 3..(y * width + x) * 3 + 3];
            for c in 0..3 {
                px[c] += g * tint[c];
            }
        }
    }
}

fn place_actions<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Result<Vec<(usize, usize, usize)>> {
    let n = rng.random_range(1..=cfg.max_actions.max(1));
    let mut durations: Vec<usize> = (0..n)
        .map(|_| rng.random_range(cfg.min_action_frames..=cfg.max_action_frames))
        .collect();
    let needed = |d: &[usize]| d.iter().sum::<usize>() + cfg.min_gap_frames * d.len().saturating_sub(1);
    while durations.len() > 1 && needed(&durations) > cfg.num_frames {
        durations.pop();
    }
    if needed(&durations) > cfg.num_frames {
        return Err(Error::Generation(format!(
            "action of {} frames does not fit in {} frames",
            durations[0], cfg.num_frames
        )));
    }
    let free = cfg.num_frames - needed(&durations);
    let mut cuts: Vec<usize> = (0..durations.len()).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(durations.len());
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (i, (&d, &cut)) in durations.iter().zip(&cuts).enumerate() {
        cursor += cut - prev_cut + if i > 0 { cfg.min_gap_frames } else { 0 };
        prev_cut = cut;
        let class = rng.random_range(0..cfg.num_classes);
        out.push((cursor, cursor + d, class));
        cursor += d;
    }
    Ok(out)
}

/// `train + eval` synthetic videos split into a [`Dataset`] with labels
/// `class_0..class_{K-1}`.
pub fn synthetic_dataset(cfg: &SynthConfig, train: usize, eval: usize, seed: u64) -> Result<Dataset> {
    let mut videos = generate_synthetic_dataset(
        &SynthConfig {
            num_videos: train + eval,
            ..cfg.clone()
        },
        seed,
    )?;
    let eval_videos = videos.split_off(train);
    Ok(Dataset {
        labels: (0..cfg.num_classes).map(|k| format!("class_{k}")).collect(),
        train: videos,
        eval: eval_videos,
    })
}

pub fn generate_synthetic_dataset(cfg: &SynthConfig, seed: u64) -> Result<Vec<AnnotatedVideo>> {
    if cfg.num_videos == 0
        || cfg.num_classes == 0
        || cfg.num_frames == 0
        || cfg.height == 0
        || cfg.width == 0
        || cfg.max_actions == 0
        || cfg.min_action_frames == 0
        || !(cfg.fps > 0.0)
    {
        return Err(Error::InvalidConfig("synthetic dataset sizes must be positive".into()));
    }
    if cfg.min_action_frames > cfg.max_action_frames {
        return Err(Error::InvalidConfig("min action length exceeds max".into()));
    }
    if cfg.min_action_frames > cfg.num_frames {
        return Err(Error::Generation(format!(
            "minimum action length {} exceeds video length {}",
            cfg.min_action_frames, cfg.num_frames
        )));
    }
    let frame_len = cfg.height * cfg.width * 3;
    (0..cfg.num_videos)
        .map(|v| {
            let mut rng = stream_rng(seed, Stream::Synth, &[v as u64]);
            let spans = place_actions(cfg, &mut rng)?;
            let mut frames: Vec<f32> = (0..cfg.num_frames * frame_len)
                .map(|_| rng.random::<f32>() * cfg.noise)
                .collect();
            for &(s, e, class) in &spans {
                for t in s..e {
                    let frame = &mut frames[t * frame_len..(t + 1) * frame_len];
                    render_action_frame(class, cfg.num_classes, t - s, cfg.height, cfg.width, frame);
                }
            }
            for x in frames.iter_mut() {
                *x = x.clamp(0.0, 1.0);
            }
            let actions = spans
                .iter()
                .map(|&(s, e, label)| GroundTruthAction {
                    start: s as f64 / cfg.fps,
                    end: e as f64 / cfg.fps,
                    label,
                })
                .collect();
            Ok(AnnotatedVideo {
                video_id: format!("synth_{v:04}"),
                frames,
                num_frames: cfg.num_frames,
                height: cfg.height,
                width: cfg.width,
                fps: cfg.fps,
                actions,
            })
        })
        .collect()
}
