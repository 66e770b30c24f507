//! Temporal-IoU mean average precision.
//!
//! Detections are ranked by score (ties: earlier start, then input order)
//! and each is greedily matched to the unmatched ground truth of highest
//! IoU in the same video. AP integrates the precision envelope over every
//! recall step (all-point interpolation); absolute numbers differ from
//! 11-point or 101-point variants.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::VideoRecord;

/// IoU of two segments given as `(start, end)`; 0 when disjoint or when
/// the union is empty.
pub fn iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn check_segment(s: (f64, f64)) -> Result<()> {
    if !(s.0.is_finite() && s.1.is_finite()) || s.1 <= s.0 {
        return Err(Error::Contract(format!("degenerate segment [{}, {}]", s.0, s.1)));
    }
    Ok(())
}

pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    check_segment(a)?;
    check_segment(b)?;
    Ok(iou(a, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub iou_thresholds: Vec<f64>,
    pub average: bool,
}

impl EvalProtocol {
    /// `[0.3:0.1:0.7]`.
    pub fn thumos() -> Self {
        EvalProtocol {
            iou_thresholds: (0..5).map(|i| (3 + i) as f64 / 10.0).collect(),
            average: true,
        }
    }

    /// `[0.5:0.05:0.95]`.
    pub fn activitynet() -> Self {
        EvalProtocol {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            average: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::InvalidConfig("no IoU thresholds".into()));
        }
        for w in self.iou_thresholds.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidConfig("IoU thresholds must be strictly increasing".into()));
            }
        }
        if self.iou_thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::InvalidConfig("IoU thresholds must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSegment {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtSegment {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
}

/// Ranking used by the matcher.
pub fn detection_order(dets: &[ScoredSegment]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].start.total_cmp(&dets[b].start))
            .then(a.cmp(&b))
    });
    order
}

/// True-positive flags in ranked order.
fn match_detections(dets: &[ScoredSegment], gts: &[GtSegment], thresh: f64) -> Vec<bool> {
    let mut by_video: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_video.entry(g.video_id.as_str()).or_default().push(i);
    }
    let mut matched = vec![false; gts.len()];
    detection_order(dets)
        .into_iter()
        .map(|d| {
            let det = &dets[d];
            let mut best: Option<(usize, f64)> = None;
            for &g in by_video.get(det.video_id.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
                if matched[g] {
                    continue;
                }
                let o = iou((det.start, det.end), (gts[g].start, gts[g].end));
                if o >= thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, _)) => {
                    matched[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// `(recall, precision)` after each ranked detection.
pub fn pr_curve(dets: &[ScoredSegment], gts: &[GtSegment], thresh: f64) -> Vec<(f64, f64)> {
    if gts.is_empty() {
        return Vec::new();
    }
    let mut tp = 0usize;
    match_detections(dets, gts, thresh)
        .into_iter()
        .enumerate()
        .map(|(k, hit)| {
            tp += hit as usize;
            (tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

/// AP for one class at one IoU threshold.
pub fn average_precision(dets: &[ScoredSegment], gts: &[GtSegment], thresh: f64) -> f64 {
    let curve = pr_curve(dets, gts, thresh);
    if curve.is_empty() {
        return 0.0;
    }
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(recall, _)) in curve.iter().enumerate() {
        if recall > prev_recall {
            ap += (recall - prev_recall) * envelope[i];
            prev_recall = recall;
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub label: String,
    pub score: f64,
}

/// Detection dump: `{"results": {video_id: [entry, ...]}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub results: BTreeMap<String, Vec<PredictionEntry>>,
}

impl Predictions {
    pub fn push(&mut self, entry: PredictionEntry) {
        self.results.entry(entry.video_id.clone()).or_default().push(entry);
    }

    pub fn len(&self) -> usize {
        self.results.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copies of the ground truth with score 1.
    pub fn from_ground_truth(records: &[VideoRecord], labels: &[String]) -> Self {
        let mut p = Predictions::default();
        for r in records {
            p.results.entry(r.video_id.clone()).or_default();
            for a in &r.actions {
                p.push(PredictionEntry {
                    video_id: r.video_id.clone(),
                    start: a.start,
                    end: a.end,
                    label: labels[a.label].clone(),
                    score: 1.0,
                });
            }
        }
        p
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::parse(
                format!("{}:{}:{}", path.display(), e.line(), e.column()),
                e.to_string(),
            )
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("predictions serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub iou_thresholds: Vec<f64>,
    /// `ap[class][threshold]`.
    pub ap: Vec<Vec<f64>>,
    /// Ground-truth instance count per class.
    pub num_gt: Vec<usize>,
    /// Mean over classes with at least one ground-truth instance.
    pub map: Vec<f64>,
    pub average_map: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let width = self.labels.iter().map(String::len).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = write!(out, "{:width$}", "class");
        for t in &self.iou_thresholds {
            let _ = write!(out, "  {t:>6.2}");
        }
        let _ = writeln!(out, "  {:>6}  {:>5}", "Avg", "#gt");
        for (c, label) in self.labels.iter().enumerate() {
            let _ = write!(out, "{label:width$}");
            for a in &self.ap[c] {
                let _ = write!(out, "  {:>6.2}", 100.0 * a);
            }
            let avg = self.ap[c].iter().sum::<f64>() / self.ap[c].len() as f64;
            let _ = writeln!(out, "  {:>6.2}  {:>5}", 100.0 * avg, self.num_gt[c]);
        }
        let _ = write!(out, "{:width$}", "mAP");
        for m in &self.map {
            let _ = write!(out, "  {:>6.2}", 100.0 * m);
        }
        let _ = writeln!(out, "  {:>6.2}", 100.0 * self.average_map);
        let _ = writeln!(out, "average mAP: {:.4}", self.average_map);
        out
    }
}

/// Splits predictions and ground truth by class.
fn per_class(
    predictions: &Predictions,
    records: &[VideoRecord],
    labels: &[String],
) -> Result<(Vec<Vec<ScoredSegment>>, Vec<Vec<GtSegment>>)> {
    let known: BTreeSet<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut unknown_videos = BTreeSet::new();
    let mut unknown_labels = BTreeSet::new();
    let mut dets = vec![Vec::new(); labels.len()];
    for (key, entries) in &predictions.results {
        for e in entries {
            let vid = e.video_id.as_str();
            if !known.contains(vid) || !known.contains(key.as_str()) {
                unknown_videos.insert(if known.contains(vid) { key.clone() } else { e.video_id.clone() });
                continue;
            }
            match index.get(e.label.as_str()) {
                Some(&c) => dets[c].push(ScoredSegment {
                    video_id: e.video_id.clone(),
                    start: e.start,
                    end: e.end,
                    score: e.score,
                }),
                None => {
                    unknown_labels.insert(e.label.clone());
                }
            }
        }
        if entries.is_empty() && !known.contains(key.as_str()) {
            unknown_videos.insert(key.clone());
        }
    }
    if !unknown_videos.is_empty() {
        let list: Vec<String> = unknown_videos.into_iter().collect();
        return Err(Error::Evaluation(format!("predictions reference unknown video_id(s): {}", list.join(", "))));
    }
    if !unknown_labels.is_empty() {
        let list: Vec<String> = unknown_labels.into_iter().collect();
        return Err(Error::Evaluation(format!("predictions reference unknown label(s): {}", list.join(", "))));
    }
    let mut gts = vec![Vec::new(); labels.len()];
    for r in records {
        for a in &r.actions {
            gts[a.label].push(GtSegment {
                video_id: r.video_id.clone(),
                start: a.start,
                end: a.end,
            });
        }
    }
    Ok((dets, gts))
}

pub fn evaluate(
    predictions: &Predictions,
    records: &[VideoRecord],
    labels: &[String],
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    protocol.validate()?;
    let (dets, gts) = per_class(predictions, records, labels)?;
    let ap: Vec<Vec<f64>> = (0..labels.len())
        .map(|c| {
            protocol
                .iou_thresholds
                .iter()
                .map(|&t| average_precision(&dets[c], &gts[c], t))
                .collect()
        })
        .collect();
    let num_gt: Vec<usize> = gts.iter().map(Vec::len).collect();
    let present: Vec<usize> = (0..labels.len()).filter(|&c| num_gt[c] > 0).collect();
    let map: Vec<f64> = (0..protocol.iou_thresholds.len())
        .map(|t| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|&c| ap[c][t]).sum::<f64>() / present.len() as f64
            }
        })
        .collect();
    let average_map = map.iter().sum::<f64>() / map.len() as f64;
    Ok(EvalReport {
        labels: labels.to_vec(),
        iou_thresholds: protocol.iou_thresholds.clone(),
        ap,
        num_gt,
        map,
        average_map,
    })
}

/// Minimal SVG step plot of a PR curve.
pub fn pr_curve_svg(title: &str, curve: &[(f64, f64)]) -> String {
    let (w, h, m) = (320.0, 240.0, 30.0);
    let x = |r: f64| m + r * (w - 2.0 * m);
    let y = |p: f64| h - m - p * (h - 2.0 * m);
    let mut path = format!("M{:.1},{:.1}", x(0.0), y(curve.first().map_or(0.0, |c| c.1)));
    for &(r, p) in curve {
        let _ = write!(path, " L{:.1},{:.1}", x(r), y(p));
    }
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>\n\
         <text x=\"{m}\" y=\"20\" font-size=\"12\">{}</text>\n\
         <path d=\"{path}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>\n</svg>\n",
        w - 2.0 * m,
        h - 2.0 * m,
        title.replace('&', "&amp;").replace('<', "&lt;"),
    )
}

/// Writes `pr_<label>.svg` per class at one IoU threshold.
pub fn write_pr_plots(
    dir: &Path,
    predictions: &Predictions,
    records: &[VideoRecord],
    labels: &[String],
    thresh: f64,
) -> Result<()> {
    let (dets, gts) = per_class(predictions, records, labels)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (c, label) in labels.iter().enumerate() {
        let curve = pr_curve(&dets[c], &gts[c], thresh);
        let safe: String = label.chars().map(|ch| if ch.is_ascii_alphanumeric() { ch } else { '_' }).collect();
        let path = dir.join(format!("pr_{safe}.svg"));
        let svg = pr_curve_svg(&format!("{label} @ tIoU {thresh:.2}"), &curve);
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
