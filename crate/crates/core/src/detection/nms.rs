use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::anchors::{decode, AnchorSet};
use super::{ActionInstance, HeadMode};
use crate::error::{Error, Result};
use crate::eval::iou;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
    pub mode: HeadMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_thresh: 0.05,
            nms_iou: 0.5,
            max_dets: 100,
            mode: HeadMode::PerSegmentClass,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.score_thresh) {
            return Err(Error::InvalidConfig(format!("score_thresh {} outside [0, 1)", self.score_thresh)));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::InvalidConfig(format!("nms_iou {} outside (0, 1]", self.nms_iou)));
        }
        if self.max_dets == 0 {
            return Err(Error::InvalidConfig("max_dets must be positive".into()));
        }
        Ok(())
    }
}

/// Maps sequence frames back to video seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeContext {
    /// Original frame index of sequence frame 0.
    pub origin_frame: f64,
    pub fps: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub start: f64,
    pub end: f64,
    pub label: usize,
    pub score: f64,
    pub anchor: usize,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then(a.anchor.cmp(&b.anchor))
}

/// Class-wise greedy suppression of overlaps above `nms_iou`; output
/// sorted by score, at most `max_dets` long.
pub fn nms(mut cands: Vec<Candidate>, nms_iou: f64, max_dets: usize) -> Vec<Candidate> {
    cands.sort_by(rank);
    let mut kept: Vec<Candidate> = Vec::new();
    for c in cands {
        if kept.len() == max_dets {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.label == c.label && iou((k.start, k.end), (c.start, c.end)) > nms_iou);
        if !suppressed {
            kept.push(c);
        }
    }
    kept
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `cls_logits` is `[A][K']`, `offsets` is `[A][2]`.
pub fn decode_and_nms(
    cls_logits: &[Vec<f64>],
    offsets: &[[f64; 2]],
    anchors: &AnchorSet,
    ctx: &DecodeContext,
    cfg: &DecodeConfig,
    video_logits: Option<&[f64]>,
) -> Result<Vec<ActionInstance>> {
    if cls_logits.len() != anchors.len() || offsets.len() != anchors.len() {
        return Err(Error::Contract(format!(
            "{} logits / {} offsets for {} anchors",
            cls_logits.len(),
            offsets.len(),
            anchors.len()
        )));
    }
    if cls_logits.iter().flatten().chain(offsets.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite head output".into()));
    }
    let video = match cfg.mode {
        HeadMode::PerSegmentClass => None,
        HeadMode::VideoLevelClass => {
            let logits = video_logits
                .ok_or_else(|| Error::Contract("video-level mode requires video-level logits".into()))?;
            if logits.is_empty() {
                return Err(Error::Contract("empty video-level logits".into()));
            }
            let p = softmax(logits);
            let (label, prob) = p
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            Some((label, prob))
        }
    };
    let mut cands = Vec::new();
    for (a, anchor) in anchors.anchors.iter().enumerate() {
        let (s, e) = decode(anchor, offsets[a]);
        let start = ((ctx.origin_frame + s) / ctx.fps).clamp(0.0, ctx.duration);
        let end = ((ctx.origin_frame + e) / ctx.fps).clamp(0.0, ctx.duration);
        if end <= start {
            continue;
        }
        let mut push = |label, score: f64| {
            if score >= cfg.score_thresh {
                cands.push(Candidate {
                    start,
                    end,
                    label,
                    score,
                    anchor: a,
                });
            }
        };
        match video {
            None => {
                for (k, &l) in cls_logits[a].iter().enumerate() {
                    push(k, sigmoid(l));
                }
            }
            Some((label, prob)) => push(label, sigmoid(cls_logits[a][0]) * prob),
        }
    }
    Ok(nms(cands, cfg.nms_iou, cfg.max_dets)
        .into_iter()
        .map(|c| ActionInstance {
            start: c.start,
            end: c.end,
            label: c.label,
            score: c.score,
        })
        .collect())
}
