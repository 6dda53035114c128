//! Frame sources: numbered image directories and in-memory sequences.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::DateTime;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::timestamp::Timestamp;

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("input directory {0}: {1}")]
    Directory(PathBuf, std::io::Error),
    #[error("frame number {0} appears twice ({1} and {2})")]
    DuplicateIndex(u64, PathBuf, PathBuf),
    #[error("decoding {0}: {1}")]
    Decode(PathBuf, image::ImageError),
}

/// One decoded frame.
#[derive(Debug, Clone)]
pub struct Frame {
    pub index: u64,
    pub timestamp: Timestamp,
    pub image: RgbImage,
}

/// Where frame timestamps come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimestampPolicy {
    /// Wall clock at decode time.
    #[default]
    Wall,
    /// `start + index / fps`, for sources with a known frame rate.
    Nominal { start: Timestamp, fps: f64 },
}

impl TimestampPolicy {
    pub fn stamp(&self, index: u64) -> Timestamp {
        match *self {
            TimestampPolicy::Wall => Timestamp::now(),
            TimestampPolicy::Nominal { start, fps } => {
                let ms = (index as f64 * 1000.0 / fps).round() as i64;
                start.plus(chrono::Duration::milliseconds(ms))
            }
        }
    }

    pub fn nominal_from_epoch_ms(start_ms: i64, fps: f64) -> Self {
        TimestampPolicy::Nominal {
            start: Timestamp::new(DateTime::from_timestamp_millis(start_ms).expect("in range")),
            fps,
        }
    }
}

/// A frame (or the reason it could not be produced) plus decode time.
#[derive(Debug)]
pub struct SourceItem {
    pub index: u64,
    pub decode: Duration,
    pub frame: Result<Frame, FrameError>,
}

pub trait FrameSource: Iterator<Item = SourceItem> + Send {}

impl<T: Iterator<Item = SourceItem> + Send> FrameSource for T {}

/// Images named by zero-padded frame numbers (`000123.png`). The number is
/// the frame index; files with non-numeric stems are ignored.
pub struct DirectorySource {
    files: VecDeque<(u64, PathBuf)>,
    policy: TimestampPolicy,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

impl DirectorySource {
    pub fn open(dir: &Path, policy: TimestampPolicy) -> Result<Self, FrameError> {
        let entries =
            std::fs::read_dir(dir).map_err(|e| FrameError::Directory(dir.to_path_buf(), e))?;
        let mut files: Vec<(u64, PathBuf)> = Vec::new();
        for entry in entries {
            let path = entry
                .map_err(|e| FrameError::Directory(dir.to_path_buf(), e))?
                .path();
            let ext_ok = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            if !ext_ok || stem.is_empty() || !stem.bytes().all(|b| b.is_ascii_digit()) {
                continue;
            }
            if let Ok(n) = stem.parse::<u64>() {
                files.push((n, path));
            }
        }
        files.sort();
        for w in files.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(FrameError::DuplicateIndex(
                    w[0].0,
                    w[0].1.clone(),
                    w[1].1.clone(),
                ));
            }
        }
        Ok(Self {
            files: files.into(),
            policy,
        })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

impl Iterator for DirectorySource {
    type Item = SourceItem;

    fn next(&mut self) -> Option<SourceItem> {
        let (index, path) = self.files.pop_front()?;
        let start = Instant::now();
        let decoded = image::open(&path).map(|img| img.to_rgb8());
        let decode = start.elapsed();
        let frame = decoded
            .map(|image| Frame {
                index,
                timestamp: self.policy.stamp(index),
                image,
            })
            .map_err(|e| FrameError::Decode(path, e));
        Some(SourceItem {
            index,
            decode,
            frame,
        })
    }
}

/// Pre-decoded frames; decode time is reported as zero.
pub struct MemorySource {
    frames: VecDeque<Frame>,
}

impl MemorySource {
    pub fn new(frames: Vec<Frame>) -> Self {
        Self {
            frames: frames.into(),
        }
    }
}

impl Iterator for MemorySource {
    type Item = SourceItem;

    fn next(&mut self) -> Option<SourceItem> {
        let f = self.frames.pop_front()?;
        Some(SourceItem {
            index: f.index,
            decode: Duration::ZERO,
            frame: Ok(f),
        })
    }
}

/// Writes `frames` as `NNNNNN.png` into `dir`.
pub fn write_frame_dir(dir: &Path, frames: &[Frame]) -> Result<(), image::ImageError> {
    std::fs::create_dir_all(dir)?;
    for f in frames {
        f.image.save(dir.join(format!("{:06}.png", f.index)))?;
    }
    Ok(())
}
