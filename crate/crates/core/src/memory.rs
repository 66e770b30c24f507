//! Long-term feature memory.
//!
//! Holds one `[N_c, L, C_f]` feature block per video. Unsampled clips read
//! their features from here; sampled clips write their fresh features back
//! as gradient-free copies. Blocks live in RAM and are flushed to
//! `<dir>/<video_id>.feat` on [`FeatureMemory::flush`].
//!
//! Cache row `m` is always treated as the feature of the current epoch's
//! clip `m`, whatever shift the row was computed under.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::Tensor;

use crate::encoder::{clips_tensor, ActivationMeter, Encoder};
use crate::error::{Error, Result};
use crate::nn::cpu;
use crate::video::{check_split, partition_video, AnnotatedVideo, ClipPartition};

pub const FEATURE_MAGIC: &[u8; 4] = b"TKFM";
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub num_clips: usize,
    pub feature_len: usize,
    pub channels: usize,
    /// Row-major `[N_c, L, C_f]`.
    pub data: Vec<f32>,
    pub last_update_epoch: Vec<u32>,
    pub epoch: u32,
    dirty: bool,
}

impl MemoryEntry {
    fn row_len(&self) -> usize {
        self.feature_len * self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.num_clips, self.feature_len, self.channels)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        buf.extend_from_slice(FEATURE_MAGIC);
        for d in [self.num_clips, self.feature_len, self.channels, self.epoch as usize] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::CacheCorruption(format!("{what}: missing TKFM header")));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (n, l, c, epoch) = (field(0) as usize, field(1) as usize, field(2) as usize, field(3));
        let expected = HEADER_LEN + 4 * n * l * c;
        if bytes.len() != expected {
            return Err(Error::CacheCorruption(format!(
                "{what}: {} bytes, header [{n}, {l}, {c}] implies {expected}",
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::CacheCorruption(format!("{what}: non-finite feature values")));
        }
        Ok(MemoryEntry {
            num_clips: n,
            feature_len: l,
            channels: c,
            data,
            last_update_epoch: vec![epoch; n],
            epoch,
            dirty: false,
        })
    }
}

#[derive(Debug, Default)]
pub struct FeatureMemory {
    dir: Option<PathBuf>,
    entries: BTreeMap<String, MemoryEntry>,
    epoch: u32,
    fetch_calls: AtomicUsize,
}

impl Clone for FeatureMemory {
    fn clone(&self) -> Self {
        FeatureMemory {
            dir: self.dir.clone(),
            entries: self.entries.clone(),
            epoch: self.epoch,
            fetch_calls: AtomicUsize::new(self.fetch_count()),
        }
    }
}

impl FeatureMemory {
    /// A RAM-only memory.
    pub fn in_memory() -> Self {
        FeatureMemory::default()
    }

    /// Opens a cache directory, loading every `.feat` file present.
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = BTreeMap::new();
        let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for item in listing {
            let path = item.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("feat") {
                continue;
            }
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            entries.insert(id, MemoryEntry::from_bytes(&bytes, &path.display().to_string())?);
        }
        let epoch = entries.values().map(|e| e.epoch).max().unwrap_or(0);
        Ok(FeatureMemory {
            dir: Some(dir.to_path_buf()),
            entries,
            epoch,
            fetch_calls: AtomicUsize::new(0),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn contains(&self, video_id: &str) -> bool {
        self.entries.contains_key(video_id)
    }

    pub fn entry(&self, video_id: &str) -> Option<&MemoryEntry> {
        self.entries.get(video_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn set_epoch(&mut self, epoch: u32) {
        self.epoch = epoch;
    }

    /// Number of `fetch` calls served so far.
    pub fn fetch_count(&self) -> usize {
        self.fetch_calls.load(Ordering::Relaxed)
    }

    /// Installs a full feature block, replacing any existing one of the same
    /// shape. A different shape is a cache-corruption error.
    pub fn insert(&mut self, video_id: &str, features: &Tensor) -> Result<()> {
        let (n, l, c) = features.dims3()?;
        if let Some(old) = self.entries.get(video_id) {
            if old.shape() != (n, l, c) {
                return Err(Error::CacheCorruption(format!(
                    "video `{video_id}`: cached shape {:?} differs from new shape {:?}",
                    old.shape(),
                    (n, l, c)
                )));
            }
        }
        let data: Vec<f32> = features.detach().flatten_all()?.to_vec1()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("video `{video_id}`: non-finite features")));
        }
        self.entries.insert(
            video_id.to_string(),
            MemoryEntry {
                num_clips: n,
                feature_len: l,
                channels: c,
                data,
                last_update_epoch: vec![self.epoch; n],
                epoch: self.epoch,
                dirty: true,
            },
        );
        Ok(())
    }

    /// Rows `remaining_idx` of the video's block, in that order, as a fresh
    /// tensor with no gradient history.
    pub fn fetch(&self, video_id: &str, remaining_idx: &[usize]) -> Result<Tensor> {
        self.fetch_calls.fetch_add(1, Ordering::Relaxed);
        let entry = self
            .entries
            .get(video_id)
            .ok_or_else(|| Error::MissingEntry(video_id.to_string()))?;
        let row = entry.row_len();
        let mut out = Vec::with_capacity(remaining_idx.len() * row);
        for &m in remaining_idx {
            if m >= entry.num_clips {
                return Err(Error::Contract(format!(
                    "clip index {m} out of range for `{video_id}` with {} clips",
                    entry.num_clips
                )));
            }
            out.extend_from_slice(&entry.data[m * row..(m + 1) * row]);
        }
        Ok(Tensor::from_vec(
            out,
            (remaining_idx.len(), entry.feature_len, entry.channels),
            &cpu(),
        )?)
    }

    /// Overwrites rows `sampled_idx` with gradient-stopped copies of `fresh`.
    pub fn update(&mut self, video_id: &str, sampled_idx: &[usize], fresh: &Tensor) -> Result<()> {
        let epoch = self.epoch;
        let entry = self
            .entries
            .get_mut(video_id)
            .ok_or_else(|| Error::MissingEntry(video_id.to_string()))?;
        let dims = fresh.dims();
        if dims != [sampled_idx.len(), entry.feature_len, entry.channels] {
            return Err(Error::Contract(format!(
                "update of `{video_id}` with shape {dims:?}, expected [{}, {}, {}]",
                sampled_idx.len(),
                entry.feature_len,
                entry.channels
            )));
        }
        if let Some(&m) = sampled_idx.iter().find(|&&m| m >= entry.num_clips) {
            return Err(Error::Contract(format!("clip index {m} out of range for `{video_id}`")));
        }
        let values: Vec<f32> = fresh.detach().flatten_all()?.to_vec1()?;
        let row = entry.row_len();
        for (k, &m) in sampled_idx.iter().enumerate() {
            entry.data[m * row..(m + 1) * row].copy_from_slice(&values[k * row..(k + 1) * row]);
            entry.last_update_epoch[m] = epoch;
        }
        entry.epoch = epoch;
        entry.dirty = true;
        Ok(())
    }

    pub fn file_path(&self, video_id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{video_id}.feat")))
    }

    /// Writes every modified entry to disk. No-op for RAM-only memories.
    pub fn flush(&mut self) -> Result<()> {
        let Some(dir) = self.dir.clone() else {
            return Ok(());
        };
        for (id, entry) in self.entries.iter_mut().filter(|(_, e)| e.dirty) {
            let path = dir.join(format!("{id}.feat"));
            let tmp = dir.join(format!("{id}.feat.tmp"));
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&entry.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            drop(f);
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
            entry.dirty = false;
        }
        Ok(())
    }
}

/// Settings for the initialization pass.
#[derive(Debug, Clone, Copy)]
pub struct MemoryLayout {
    pub frame_budget: usize,
    pub clip_len: usize,
    pub post_reducer: bool,
}

/// Encodes every clip of every video (shift 0, no augmentation, eval mode)
/// and writes the result into `memory`, flushing to disk.
pub fn init_memory(
    videos: &[AnnotatedVideo],
    encoder: &Encoder,
    layout: MemoryLayout,
    memory: &mut FeatureMemory,
) -> Result<()> {
    for video in videos {
        let (partition, clips) = partition_video(video, layout.frame_budget, layout.clip_len, 0)?;
        let all: Vec<usize> = (0..partition.num_clips).collect();
        let raw = encoder.encode_raw(&clips_tensor(&clips, &all)?, false, &ActivationMeter::default())?;
        let features = if layout.post_reducer {
            encoder.reduce(&raw)?
        } else {
            raw
        };
        memory.insert(&video.video_id, &features)?;
    }
    memory.flush()
}

/// Interleaves fresh rows (at `sampled_idx`) and cached rows (at
/// `remaining_idx`) back into clip order.
pub fn assemble_features(fresh: &Tensor, cached: &Tensor, partition: &ClipPartition) -> Result<Tensor> {
    let (sampled, remaining) = (&partition.sampled_idx, &partition.remaining_idx);
    check_split(partition.num_clips, sampled, remaining)?;
    if fresh.dim(0)? != sampled.len() || cached.dim(0)? != remaining.len() {
        return Err(Error::Contract(format!(
            "assemble: {} fresh rows for |I| = {}, {} cached rows for |I'| = {}",
            fresh.dim(0)?,
            sampled.len(),
            cached.dim(0)?,
            remaining.len()
        )));
    }
    if remaining.is_empty()
        && sampled.iter().enumerate().all(|(k, &m)| k == m) {
            return Ok(fresh.clone());
        }
    let mut order = vec![0u32; partition.num_clips];
    for (k, &m) in sampled.iter().enumerate() {
        order[m] = k as u32;
    }
    for (k, &m) in remaining.iter().enumerate() {
        order[m] = (sampled.len() + k) as u32;
    }
    let stacked = if remaining.is_empty() {
        fresh.clone()
    } else if sampled.is_empty() {
        cached.clone()
    } else {
        Tensor::cat(&[fresh, cached], 0)?
    };
    let order = Tensor::from_vec(order, partition.num_clips, &cpu())?;
    Ok(stacked.index_select(&order, 0)?)
}
