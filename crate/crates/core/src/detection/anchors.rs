//! Multi-scale temporal anchors, the box transform, and target assignment.

use crate::eval::iou;

/// A temporal anchor in sequence-frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub center: f64,
    pub length: f64,
    pub level: usize,
}

impl Anchor {
    pub fn segment(&self) -> (f64, f64) {
        (self.center - self.length / 2.0, self.center + self.length / 2.0)
    }
}

/// Anchors for every position of every pyramid level, ordered level-major,
/// then by position (center), then by length.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    pub level_lengths: Vec<usize>,
    /// Level strides in frames.
    pub strides: Vec<f64>,
    pub scales: Vec<f64>,
}

impl AnchorSet {
    /// `token_frames` is the number of frames one level-0 token spans.
    pub fn new(level_lengths: &[usize], token_frames: f64, scales: &[f64]) -> Self {
        let mut anchors = Vec::new();
        let mut strides = Vec::with_capacity(level_lengths.len());
        for (level, &len) in level_lengths.iter().enumerate() {
            let stride = token_frames * (1u64 << level) as f64;
            strides.push(stride);
            for t in 0..len {
                let center = (t as f64 + 0.5) * stride;
                for &s in scales {
                    anchors.push(Anchor {
                        center,
                        length: s * stride,
                        level,
                    });
                }
            }
        }
        AnchorSet {
            anchors,
            level_lengths: level_lengths.to_vec(),
            strides,
            scales: scales.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn per_position(&self) -> usize {
        self.scales.len()
    }
}

/// `center' = center + dc * length`, `length' = length * exp(dl)`.
pub fn decode(anchor: &Anchor, offsets: [f64; 2]) -> (f64, f64) {
    let c = anchor.center + offsets[0] * anchor.length;
    let l = anchor.length * offsets[1].exp();
    (c - l / 2.0, c + l / 2.0)
}

/// Inverse of [`decode`].
pub fn encode(anchor: &Anchor, segment: (f64, f64)) -> [f64; 2] {
    let c = (segment.0 + segment.1) / 2.0;
    let l = segment.1 - segment.0;
    [(c - anchor.center) / anchor.length, (l / anchor.length).ln()]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Positive { class: usize, gt: usize },
    Background,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTarget {
    pub label: AnchorLabel,
    /// Zero unless positive.
    pub regression: [f64; 2],
}

pub const POSITIVE_IOU: f64 = 0.5;
pub const BACKGROUND_IOU: f64 = 0.4;

/// Ground truth in sequence frames: `(start, end, class)`.
pub type FrameSegment = (f64, f64, usize);

/// Labels each anchor positive (IoU >= 0.5 with its best GT), background
/// (best IoU < 0.4) or ignored, then forces every GT's best anchor positive.
pub fn assign_targets(anchors: &AnchorSet, gts: &[FrameSegment]) -> Vec<AnchorTarget> {
    let mut targets = vec![
        AnchorTarget {
            label: AnchorLabel::Background,
            regression: [0.0; 2],
        };
        anchors.len()
    ];
    if gts.is_empty() {
        return targets;
    }
    let mut best_anchor = vec![(f64::NEG_INFINITY, 0usize); gts.len()];
    for (a, anchor) in anchors.anchors.iter().enumerate() {
        let seg = anchor.segment();
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (g, gt) in gts.iter().enumerate() {
            let o = iou(seg, (gt.0, gt.1));
            if o > best.0 {
                best = (o, g);
            }
            if o > best_anchor[g].0 {
                best_anchor[g] = (o, a);
            }
        }
        targets[a].label = if best.0 >= POSITIVE_IOU {
            AnchorLabel::Positive {
                class: gts[best.1].2,
                gt: best.1,
            }
        } else if best.0 < BACKGROUND_IOU {
            AnchorLabel::Background
        } else {
            AnchorLabel::Ignore
        };
    }
    for (g, &(o, a)) in best_anchor.iter().enumerate() {
        if o > 0.0 {
            targets[a].label = AnchorLabel::Positive {
                class: gts[g].2,
                gt: g,
            };
        }
    }
    for (t, anchor) in targets.iter_mut().zip(&anchors.anchors) {
        if let AnchorLabel::Positive { gt, .. } = t.label {
            t.regression = encode(anchor, (gts[gt].0, gts[gt].1));
        }
    }
    targets
}
