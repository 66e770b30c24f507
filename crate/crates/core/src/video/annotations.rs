//! JSON annotation files.
//!
//! ```json
//! {
//!   "labels": ["jump", "run"],
//!   "videos": [
//!     {"video_id": "v0", "duration": 16.0, "fps": 8.0, "subset": "train",
//!      "actions": [{"start": 1.0, "end": 3.5, "label": "jump"}]}
//!   ]
//! }
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GroundTruthAction;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub duration: f64,
    pub fps: f64,
    pub subset: Option<String>,
    pub actions: Vec<GroundTruthAction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub labels: Vec<String>,
    pub records: Vec<VideoRecord>,
}

impl AnnotationSet {
    pub fn label_index(&self) -> HashMap<&str, usize> {
        self.labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect()
    }

    pub fn record(&self, video_id: &str) -> Option<&VideoRecord> {
        self.records.iter().find(|r| r.video_id == video_id)
    }
}

#[derive(Deserialize)]
struct RawFile {
    labels: Option<Vec<String>>,
    videos: Option<Vec<RawVideo>>,
}

#[derive(Deserialize)]
struct RawVideo {
    video_id: Option<String>,
    duration: Option<f64>,
    fps: Option<f64>,
    subset: Option<String>,
    actions: Option<Vec<RawAction>>,
}

#[derive(Deserialize)]
struct RawAction {
    start: Option<f64>,
    end: Option<f64>,
    label: Option<String>,
}

#[derive(Serialize)]
struct OutFile<'a> {
    labels: &'a [String],
    videos: Vec<OutVideo<'a>>,
}

#[derive(Serialize)]
struct OutVideo<'a> {
    video_id: &'a str,
    duration: f64,
    fps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    subset: Option<&'a str>,
    actions: Vec<OutAction<'a>>,
}

#[derive(Serialize)]
struct OutAction<'a> {
    start: f64,
    end: f64,
    label: &'a str,
}

pub fn parse_annotations(text: &str, source: &str) -> Result<AnnotationSet> {
    let raw: RawFile = serde_json::from_str(text).map_err(|e| {
        Error::parse(format!("{source}:{}:{}", e.line(), e.column()), e.to_string())
    })?;
    let labels = raw
        .labels
        .ok_or_else(|| Error::parse(source, "missing top-level field `labels`"))?;
    let videos = raw
        .videos
        .ok_or_else(|| Error::parse(source, "missing top-level field `videos`"))?;
    let label_map: HashMap<&str, usize> =
        labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();

    let mut records = Vec::with_capacity(videos.len());
    for (i, v) in videos.into_iter().enumerate() {
        let video_id = v
            .video_id
            .ok_or_else(|| Error::parse(format!("{source}: videos[{i}]"), "missing field `video_id`"))?;
        let at = |field: &str| format!("{source}: video `{video_id}` (videos[{i}]).{field}");
        let duration = v.duration.ok_or_else(|| Error::parse(at("duration"), "missing field"))?;
        let fps = v.fps.ok_or_else(|| Error::parse(at("fps"), "missing field"))?;
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::parse(at("fps"), format!("fps must be positive, got {fps}")));
        }
        if !(duration.is_finite() && duration >= 0.0) {
            return Err(Error::parse(at("duration"), format!("invalid duration {duration}")));
        }
        let raw_actions = v.actions.ok_or_else(|| Error::parse(at("actions"), "missing field"))?;
        let mut actions = Vec::with_capacity(raw_actions.len());
        for (j, a) in raw_actions.into_iter().enumerate() {
            let field = |f: &str| at(&format!("actions[{j}].{f}"));
            let start = a.start.ok_or_else(|| Error::parse(field("start"), "missing field"))?;
            let end = a.end.ok_or_else(|| Error::parse(field("end"), "missing field"))?;
            let label = a.label.ok_or_else(|| Error::parse(field("label"), "missing field"))?;
            if !(start.is_finite() && end.is_finite() && start < end) {
                return Err(Error::parse(
                    field("end"),
                    format!("start {start} must be < end {end}"),
                ));
            }
            let label = *label_map
                .get(label.as_str())
                .ok_or_else(|| Error::parse(field("label"), format!("unknown label `{label}`")))?;
            actions.push(GroundTruthAction { start, end, label });
        }
        records.push(VideoRecord {
            video_id,
            duration,
            fps,
            subset: v.subset,
            actions,
        });
    }
    Ok(AnnotationSet { labels, records })
}

pub fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, &path.display().to_string())
}

pub fn write_annotations(path: &Path, set: &AnnotationSet) -> Result<()> {
    let out = OutFile {
        labels: &set.labels,
        videos: set
            .records
            .iter()
            .map(|r| OutVideo {
                video_id: &r.video_id,
                duration: r.duration,
                fps: r.fps,
                subset: r.subset.as_deref(),
                actions: r
                    .actions
                    .iter()
                    .map(|a| OutAction {
                        start: a.start,
                        end: a.end,
                        label: &set.labels[a.label],
                    })
                    .collect(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&out).expect("annotation serialization");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
