//! Raw video files: a 16-byte little-endian header (`TKVD`, T, H, W as
//! `u32`) followed by `T*H*W*3` row-major `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const VIDEO_MAGIC: &[u8; 4] = b"TKVD";

pub fn write_video_file(
    path: &Path,
    num_frames: usize,
    height: usize,
    width: usize,
    frames: &[f32],
) -> Result<()> {
    if frames.len() != num_frames * height * width * 3 {
        return Err(Error::Contract(format!(
            "{} values for video shape [{num_frames}, {height}, {width}, 3]",
            frames.len()
        )));
    }
    let mut buf = Vec::with_capacity(16 + frames.len() * 4);
    buf.extend_from_slice(VIDEO_MAGIC);
    for d in [num_frames, height, width] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in frames {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Returns `(T, H, W, frames)`.
pub fn read_video_file(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let where_ = path.display().to_string();
    if bytes.len() < 16 || &bytes[..4] != VIDEO_MAGIC {
        return Err(Error::parse(where_, "missing TKVD header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (t, h, w) = (dim(0), dim(1), dim(2));
    let n = t * h * w * 3;
    if bytes.len() != 16 + 4 * n {
        return Err(Error::parse(
            where_,
            format!("payload is {} bytes, header implies {}", bytes.len() - 16, 4 * n),
        ));
    }
    let frames = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((t, h, w, frames))
}
