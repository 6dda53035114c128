//! Single-step and two-step detection over a frame stream.
//!
//! Single-step runs one detector (phone + licence plate) on the resized full
//! frame. Two-step finds windscreens first, cuts the driver-side part of each
//! windscreen out of the original frame, and runs the phone detector on that
//! crop. Either way every emitted box is in original-frame coordinates and
//! the tracker is stepped once per frame.

use std::time::{Duration, Instant};

use image::imageops;
use log::warn;
use phonewatch_core::detect::{ClassLabel, DetectError, Detection};
use phonewatch_core::geometry::{
    driver_side_region, BBox, DriverSide, FrameSize, Transform, TransformChain,
};
use phonewatch_core::track::{TrackError, TrackId, TrackView, Tracker};
use serde::{Deserialize, Serialize};

use crate::backend::{detect_frame, FrameBackend};
use crate::frames::{Frame, FrameSource};
use crate::timestamp::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    SingleStep,
    TwoStep,
}

impl PipelineMode {
    /// The class whose tracks count vehicles in this mode.
    pub fn vehicle_basis(&self) -> ClassLabel {
        match self {
            PipelineMode::SingleStep => ClassLabel::licence_plate(),
            PipelineMode::TwoStep => ClassLabel::windscreen(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("frame {frame_index}: {source}")]
    Detect {
        frame_index: u64,
        source: DetectError,
    },
    #[error("frame {frame_index}: {source}")]
    Track {
        frame_index: u64,
        source: TrackError,
    },
    #[error("frame {frame_index}: {message}")]
    Frame { frame_index: u64, message: String },
    #[error("pipeline configuration: {0}")]
    Config(String),
}

impl PipelineError {
    pub fn frame_index(&self) -> Option<u64> {
        match self {
            PipelineError::Detect { frame_index, .. }
            | PipelineError::Track { frame_index, .. }
            | PipelineError::Frame { frame_index, .. } => Some(*frame_index),
            PipelineError::Config(_) => None,
        }
    }
}

/// How the driver-side crop is cut from a windscreen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    pub driver_side: DriverSide,
    pub driver_fraction: f64,
    /// Windscreen padding, as a fraction of its size per side, applied
    /// before taking the driver-side part.
    pub crop_padding: f64,
    /// Crops with fewer pixels than this are skipped.
    pub min_crop_pixels: u64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            driver_side: DriverSide::Right,
            driver_fraction: 0.5,
            crop_padding: 0.0,
            min_crop_pixels: 0,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.driver_fraction > 0.0 && self.driver_fraction <= 1.0) {
            return Err(format!(
                "driver_fraction {} outside (0, 1]",
                self.driver_fraction
            ));
        }
        if !(self.crop_padding.is_finite() && self.crop_padding >= 0.0) {
            return Err(format!(
                "crop_padding {} must be non-negative",
                self.crop_padding
            ));
        }
        Ok(())
    }

    /// Pixel-aligned driver-side region of `windscreen`, or `None` if it is
    /// empty or below the minimum size.
    pub fn region(&self, windscreen: &BBox, frame: FrameSize) -> Option<BBox> {
        let padded = windscreen.padded(self.crop_padding, frame).ok()?;
        let region = driver_side_region(&padded, self.driver_side, self.driver_fraction)
            .ok()?
            .snap_to_pixels(frame)?;
        (region.area() >= self.min_crop_pixels as f64).then_some(region)
    }
}

/// One detection of a processed frame, in frame coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetection {
    pub label: ClassLabel,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    /// Track the detection was attached to; `None` when tracking is off.
    pub track_id: Option<TrackId>,
    /// Two-step phones: index of the windscreen detection they came from.
    pub windscreen: Option<usize>,
    pub windscreen_track_id: Option<TrackId>,
    /// Two-step phones: the driver-side crop region searched.
    pub region: Option<BBox>,
}

/// Per-stage wall time in microseconds. Absent stages did not run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub decode_us: Option<u64>,
    pub detect1_us: u64,
    pub crop_us: Option<u64>,
    pub detect2_us: Option<u64>,
    pub track_us: Option<u64>,
}

impl StageTimings {
    pub fn total_us(&self) -> u64 {
        self.decode_us.unwrap_or(0)
            + self.detect1_us
            + self.crop_us.unwrap_or(0)
            + self.detect2_us.unwrap_or(0)
            + self.track_us.unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_index: u64,
    pub timestamp: Timestamp,
    pub frame_size: FrameSize,
    pub mode: PipelineMode,
    pub detections: Vec<FrameDetection>,
    /// Confirmed tracks after this frame, all classes, sorted by ID.
    pub confirmed: Vec<TrackView>,
    /// Tracks that ended on this frame.
    pub deleted: Vec<TrackView>,
    pub timings: StageTimings,
    pub warnings: Vec<String>,
}

impl FrameResult {
    pub fn confirmed_of<'a>(
        &'a self,
        label: &'a ClassLabel,
    ) -> impl Iterator<Item = &'a TrackView> {
        self.confirmed.iter().filter(move |t| &t.label == label)
    }

    pub fn is_confirmed(&self, id: TrackId) -> bool {
        self.confirmed.binary_search_by_key(&id, |t| t.id).is_ok()
    }

    pub fn of_label<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a FrameDetection> {
        self.detections.iter().filter(move |d| d.label.is(label))
    }
}

/// Receives every processed frame, in frame order.
pub trait FrameSink {
    fn on_frame(&mut self, result: &FrameResult, frame: &Frame);
}

impl<F: FnMut(&FrameResult, &Frame)> FrameSink for F {
    fn on_frame(&mut self, result: &FrameResult, frame: &Frame) {
        self(result, frame)
    }
}

/// What [`Pipeline::run_stream`] does when a frame fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OnFrameError {
    /// Log and continue with the next frame.
    #[default]
    Skip,
    /// Stop the stream; the summary is marked aborted.
    Abort,
}

/// Mean per-frame microseconds of each stage (stages that did not run count
/// as zero).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMeans {
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub decode_us: f64,
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub detect1_us: f64,
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub crop_us: f64,
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub detect2_us: f64,
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub track_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSummary {
    pub frames: u64,
    pub failed: u64,
    pub wall: Duration,
    /// Time spent decoding, included in `wall`.
    pub decode: Duration,
    pub stage_means: StageMeans,
    /// Set when the stream stopped on an error.
    pub aborted: Option<String>,
}

impl StreamSummary {
    /// Processed frames over wall time.
    pub fn mean_fps(&self) -> f64 {
        fps(self.frames, self.wall)
    }

    /// Processed frames over wall time minus decode time.
    pub fn mean_fps_excluding_decode(&self) -> f64 {
        fps(self.frames, self.wall.saturating_sub(self.decode))
    }
}

fn fps(frames: u64, wall: Duration) -> f64 {
    let secs = wall.as_secs_f64();
    if secs > 0.0 {
        frames as f64 / secs
    } else {
        0.0
    }
}

fn micros(d: Duration) -> u64 {
    d.as_micros().min(u64::MAX as u128) as u64
}

pub struct Pipeline {
    mode: PipelineMode,
    primary: FrameBackend,
    phone: Option<FrameBackend>,
    crop: CropConfig,
    tracker: Option<Tracker>,
}

fn require_classes(
    backend: &FrameBackend,
    needed: &[&str],
    role: &str,
) -> Result<(), PipelineError> {
    let spec = backend.spec();
    for n in needed {
        if !spec.classes.iter().any(|c| c.is(n)) {
            return Err(PipelineError::Config(format!(
                "{role} detector `{}` must expose class `{n}`",
                spec.name
            )));
        }
    }
    Ok(())
}

impl Pipeline {
    /// One detector over the full frame finding phones and licence plates.
    pub fn single_step(
        backend: FrameBackend,
        tracker: Option<Tracker>,
    ) -> Result<Self, PipelineError> {
        require_classes(
            &backend,
            &[ClassLabel::PHONE, ClassLabel::LICENCE_PLATE],
            "single-step",
        )?;
        Ok(Self {
            mode: PipelineMode::SingleStep,
            primary: backend,
            phone: None,
            crop: CropConfig::default(),
            tracker,
        })
    }

    /// Windscreen detector, driver-side crop, phone detector.
    pub fn two_step(
        windscreen: FrameBackend,
        phone: FrameBackend,
        crop: CropConfig,
        tracker: Option<Tracker>,
    ) -> Result<Self, PipelineError> {
        require_classes(&windscreen, &[ClassLabel::WINDSCREEN], "windscreen")?;
        require_classes(&phone, &[ClassLabel::PHONE], "phone")?;
        crop.validate().map_err(PipelineError::Config)?;
        Ok(Self {
            mode: PipelineMode::TwoStep,
            primary: windscreen,
            phone: Some(phone),
            crop,
            tracker,
        })
    }

    pub fn mode(&self) -> PipelineMode {
        self.mode
    }

    pub fn tracker(&self) -> Option<&Tracker> {
        self.tracker.as_ref()
    }

    pub fn tracker_mut(&mut self) -> Option<&mut Tracker> {
        self.tracker.as_mut()
    }

    pub fn process(&mut self, frame: &Frame) -> Result<FrameResult, PipelineError> {
        match self.mode {
            PipelineMode::SingleStep => self.run_single_step(frame),
            PipelineMode::TwoStep => self.run_two_step(frame),
        }
    }

    fn frame_size(frame: &Frame) -> Result<FrameSize, PipelineError> {
        FrameSize::new(frame.image.width(), frame.image.height()).map_err(|e| {
            PipelineError::Frame {
                frame_index: frame.index,
                message: e.to_string(),
            }
        })
    }

    pub fn run_single_step(&mut self, frame: &Frame) -> Result<FrameResult, PipelineError> {
        let size = Self::frame_size(frame)?;
        let t = Instant::now();
        let found = detect_frame(
            &mut self.primary,
            frame.index,
            &frame.image,
            size,
            &TransformChain::new(),
        )
        .map_err(|source| PipelineError::Detect {
            frame_index: frame.index,
            source,
        })?;
        let timings = StageTimings {
            detect1_us: micros(t.elapsed()),
            ..StageTimings::default()
        };
        let detections = found
            .frame_space
            .into_iter()
            .map(|d| FrameDetection {
                label: d.label,
                bbox: d.bbox,
                score: d.score,
                track_id: None,
                windscreen: None,
                windscreen_track_id: None,
                region: None,
            })
            .collect();
        let mut result = FrameResult {
            frame_index: frame.index,
            timestamp: frame.timestamp,
            frame_size: size,
            mode: PipelineMode::SingleStep,
            detections,
            confirmed: Vec::new(),
            deleted: Vec::new(),
            timings,
            warnings: Vec::new(),
        };
        self.track(&mut result)?;
        Ok(result)
    }

    pub fn run_two_step(&mut self, frame: &Frame) -> Result<FrameResult, PipelineError> {
        let size = Self::frame_size(frame)?;
        let detect_err = |source| PipelineError::Detect {
            frame_index: frame.index,
            source,
        };
        let t = Instant::now();
        let windscreens: Vec<Detection> = detect_frame(
            &mut self.primary,
            frame.index,
            &frame.image,
            size,
            &TransformChain::new(),
        )
        .map_err(detect_err)?
        .frame_space
        .into_iter()
        .filter(|d| d.label.is(ClassLabel::WINDSCREEN))
        .collect();
        let mut timings = StageTimings {
            detect1_us: micros(t.elapsed()),
            ..StageTimings::default()
        };

        let mut detections: Vec<FrameDetection> = windscreens
            .iter()
            .map(|d| FrameDetection {
                label: d.label.clone(),
                bbox: d.bbox,
                score: d.score,
                track_id: None,
                windscreen: None,
                windscreen_track_id: None,
                region: None,
            })
            .collect();
        let mut warnings = Vec::new();
        let phone_backend = self
            .phone
            .as_mut()
            .expect("two-step pipeline has a phone detector");
        let mut crop_time = Duration::ZERO;
        let mut detect2_time = Duration::ZERO;
        let mut ran_step2 = false;
        for (wi, w) in windscreens.iter().enumerate() {
            let t = Instant::now();
            let Some(region) = self.crop.region(&w.bbox, size) else {
                let msg = format!(
                    "frame {}: windscreen {wi} at {:?} has no usable driver-side crop; skipped",
                    frame.index,
                    w.bbox.to_array()
                );
                warn!("{msg}");
                warnings.push(msg);
                continue;
            };
            let crop = imageops::crop_imm(
                &frame.image,
                region.x_min() as u32,
                region.y_min() as u32,
                region.width() as u32,
                region.height() as u32,
            )
            .to_image();
            crop_time += t.elapsed();

            let t = Instant::now();
            let prefix = TransformChain::from(Transform::crop(region));
            let phones = detect_frame(phone_backend, frame.index, &crop, size, &prefix)
                .map_err(detect_err)?;
            detect2_time += t.elapsed();
            ran_step2 = true;
            detections.extend(
                phones
                    .frame_space
                    .into_iter()
                    .filter(|d| d.label.is(ClassLabel::PHONE))
                    .map(|d| FrameDetection {
                        label: d.label,
                        bbox: d.bbox,
                        score: d.score,
                        track_id: None,
                        windscreen: Some(wi),
                        windscreen_track_id: None,
                        region: Some(region),
                    }),
            );
        }
        if ran_step2 {
            timings.crop_us = Some(micros(crop_time));
            timings.detect2_us = Some(micros(detect2_time));
        }

        let mut result = FrameResult {
            frame_index: frame.index,
            timestamp: frame.timestamp,
            frame_size: size,
            mode: PipelineMode::TwoStep,
            detections,
            confirmed: Vec::new(),
            deleted: Vec::new(),
            timings,
            warnings,
        };
        self.track(&mut result)?;
        for i in 0..result.detections.len() {
            if let Some(wi) = result.detections[i].windscreen {
                result.detections[i].windscreen_track_id = result.detections[wi].track_id;
            }
        }
        Ok(result)
    }

    fn track(&mut self, result: &mut FrameResult) -> Result<(), PipelineError> {
        let Some(tracker) = self.tracker.as_mut() else {
            return Ok(());
        };
        let t = Instant::now();
        let dets: Vec<Detection> = result
            .detections
            .iter()
            .map(|d| Detection {
                label: d.label.clone(),
                bbox: d.bbox,
                score: d.score,
            })
            .collect();
        let out =
            tracker
                .step(result.frame_index, &dets)
                .map_err(|source| PipelineError::Track {
                    frame_index: result.frame_index,
                    source,
                })?;
        for (d, id) in result.detections.iter_mut().zip(out.detection_tracks) {
            d.track_id = Some(id);
        }
        result.confirmed = out.confirmed;
        result.deleted = out.deleted;
        result.timings.track_us = Some(micros(t.elapsed()));
        Ok(())
    }

    /// Processes every frame of `source` in order, handing each result to
    /// every sink.
    pub fn run_stream<S: FrameSource>(
        &mut self,
        source: S,
        sinks: &mut [&mut dyn FrameSink],
        on_error: OnFrameError,
    ) -> StreamSummary {
        let start = Instant::now();
        let mut frames = 0u64;
        let mut failed = 0u64;
        let mut decode = Duration::ZERO;
        let mut sums = [0u64; 5];
        let mut aborted = None;
        for item in source {
            decode += item.decode;
            let outcome = item
                .frame
                .map_err(|e| PipelineError::Frame {
                    frame_index: item.index,
                    message: e.to_string(),
                })
                .and_then(|frame| {
                    let mut r = self.process(&frame)?;
                    r.timings.decode_us = Some(micros(item.decode));
                    Ok((r, frame))
                });
            match outcome {
                Ok((result, frame)) => {
                    frames += 1;
                    let t = &result.timings;
                    sums[0] += t.decode_us.unwrap_or(0);
                    sums[1] += t.detect1_us;
                    sums[2] += t.crop_us.unwrap_or(0);
                    sums[3] += t.detect2_us.unwrap_or(0);
                    sums[4] += t.track_us.unwrap_or(0);
                    for sink in sinks.iter_mut() {
                        sink.on_frame(&result, &frame);
                    }
                }
                Err(e) => {
                    failed += 1;
                    warn!("{e}");
                    if on_error == OnFrameError::Abort {
                        aborted = Some(e.to_string());
                        break;
                    }
                }
            }
        }
        let n = frames.max(1) as f64;
        StreamSummary {
            frames,
            failed,
            wall: start.elapsed(),
            decode,
            stage_means: StageMeans {
                decode_us: sums[0] as f64 / n,
                detect1_us: sums[1] as f64 / n,
                crop_us: sums[2] as f64 / n,
                detect2_us: sums[3] as f64 / n,
                track_us: sums[4] as f64 / n,
            },
            aborted,
        }
    }
}
