//! Detector abstraction and a deterministic scripted backend.
//!
//! Backends see an image already resized to their input size and return
//! boxes in that input space. [`detect`] applies the score threshold, the
//! class filter and input-space clipping, so every backend gets identical
//! post-processing.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::geometry::{BBox, FrameSize, Transform, TransformChain};

/// Object class name. Case-sensitive; cheap to clone.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassLabel(Arc<str>);

impl ClassLabel {
    pub const PHONE: &'static str = "phone";
    pub const LICENCE_PLATE: &'static str = "licence_plate";
    pub const WINDSCREEN: &'static str = "windscreen";

    pub fn new(name: &str) -> Self {
        ClassLabel(Arc::from(name))
    }

    pub fn phone() -> Self {
        Self::new(Self::PHONE)
    }

    pub fn licence_plate() -> Self {
        Self::new(Self::LICENCE_PLATE)
    }

    pub fn windscreen() -> Self {
        Self::new(Self::WINDSCREEN)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is(&self, name: &str) -> bool {
        &*self.0 == name
    }
}

impl fmt::Debug for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(&*self.0, f)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for ClassLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for ClassLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(ClassLabel::new(&s))
    }
}

/// The set of class names a deployment knows about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRegistry {
    labels: BTreeSet<ClassLabel>,
}

impl Default for LabelRegistry {
    fn default() -> Self {
        let mut labels = BTreeSet::new();
        labels.insert(ClassLabel::phone());
        labels.insert(ClassLabel::licence_plate());
        labels.insert(ClassLabel::windscreen());
        Self { labels }
    }
}

impl LabelRegistry {
    pub fn empty() -> Self {
        Self {
            labels: BTreeSet::new(),
        }
    }

    /// Adds a label; returns false when it was already registered.
    pub fn register(&mut self, name: &str) -> bool {
        self.labels.insert(ClassLabel::new(name))
    }

    pub fn lookup(&self, name: &str) -> Option<ClassLabel> {
        self.labels.iter().find(|l| l.is(name)).cloned()
    }

    pub fn contains(&self, label: &ClassLabel) -> bool {
        self.labels.contains(label)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassLabel> {
        self.labels.iter()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DetectError {
    #[error("score {0} outside [0, 1]")]
    BadScore(f64),
    #[error("backend `{backend}` failed: {message}")]
    Backend { backend: String, message: String },
}

/// One detected object in some coordinate space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: ClassLabel,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(label: ClassLabel, bbox: BBox, score: f64) -> Result<Self, DetectError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(DetectError::BadScore(score));
        }
        Ok(Self { label, bbox, score })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSpec {
    pub name: String,
    pub input_size: FrameSize,
    pub classes: BTreeSet<ClassLabel>,
    pub score_threshold: f64,
}

/// Default threshold for evaluation runs, which want low-confidence
/// detections for the precision/recall curve.
pub const EVAL_SCORE_THRESHOLD: f64 = 0.25;
/// Default threshold for live violation logging.
pub const LIVE_SCORE_THRESHOLD: f64 = 0.5;

/// What a backend is asked to look at.
pub struct DetectRequest<'a, I: ?Sized> {
    pub frame_index: u64,
    /// Pixels already resized to the backend's input size.
    pub image: &'a I,
    /// Size of the original frame.
    pub source_size: FrameSize,
    /// Mapping from original-frame coordinates to the backend input.
    pub view: &'a TransformChain,
}

/// A detector. Implementations return raw detections in input-space
/// coordinates; thresholding and clipping happen in [`detect`].
pub trait DetectorBackend<I: ?Sized> {
    fn spec(&self) -> &DetectorSpec;

    fn infer(&mut self, request: &DetectRequest<'_, I>) -> Result<Vec<Detection>, DetectError>;
}

impl<I: ?Sized, B: DetectorBackend<I> + ?Sized> DetectorBackend<I> for alloc::boxed::Box<B> {
    fn spec(&self) -> &DetectorSpec {
        (**self).spec()
    }

    fn infer(&mut self, request: &DetectRequest<'_, I>) -> Result<Vec<Detection>, DetectError> {
        (**self).infer(request)
    }
}

/// Runs `backend` and keeps detections that are in its class set, at or
/// above its threshold, and still have area after clipping to the input.
/// Backend order is preserved.
pub fn detect<I: ?Sized, B: DetectorBackend<I> + ?Sized>(
    backend: &mut B,
    request: &DetectRequest<'_, I>,
) -> Result<Vec<Detection>, DetectError> {
    let raw = backend.infer(request)?;
    let spec = backend.spec();
    let (w, h) = (
        spec.input_size.width() as f64,
        spec.input_size.height() as f64,
    );
    Ok(raw
        .into_iter()
        .filter(|d| d.score >= spec.score_threshold && spec.classes.contains(&d.label))
        .filter_map(|d| {
            let bbox = d.bbox.clamp_to(w, h)?;
            Some(Detection { bbox, ..d })
        })
        .collect())
}

/// How scripted boxes relate to what the backend is shown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptCoords {
    /// The box is in an image of size `space` that is shown to the detector
    /// in full; it is rescaled to the input size.
    #[default]
    Input,
    /// The box is anchored in the original frame (`space` is the frame
    /// size). At query time it is pushed through the request's view, so a
    /// crop only sees the boxes that fall inside it.
    Frame,
}

/// One scripted detection.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptEntry {
    pub frame: u64,
    pub label: ClassLabel,
    pub bbox: BBox,
    pub score: f64,
    pub space: FrameSize,
}

/// Replays detections per frame index. Immutable after construction and
/// cheap to clone, so instances can be shared across workers.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    spec: DetectorSpec,
    coords: ScriptCoords,
    frames: Arc<BTreeMap<u64, Vec<ScriptEntry>>>,
}

impl ScriptedBackend {
    pub fn new(spec: DetectorSpec, coords: ScriptCoords, entries: Vec<ScriptEntry>) -> Self {
        let mut frames: BTreeMap<u64, Vec<ScriptEntry>> = BTreeMap::new();
        for e in entries {
            frames.entry(e.frame).or_default().push(e);
        }
        Self {
            spec,
            coords,
            frames: Arc::new(frames),
        }
    }

    pub fn coords(&self) -> ScriptCoords {
        self.coords
    }

    pub fn entries(&self, frame: u64) -> &[ScriptEntry] {
        self.frames.get(&frame).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Number of frames with at least one scripted entry.
    pub fn scripted_frames(&self) -> usize {
        self.frames.len()
    }

    fn place(&self, e: &ScriptEntry, source_size: FrameSize, view: &TransformChain) -> Option<BBox> {
        match self.coords {
            ScriptCoords::Input => {
                Transform::resize(e.space, self.spec.input_size).apply(&e.bbox)
            }
            ScriptCoords::Frame => {
                let in_frame = Transform::resize(e.space, source_size).apply(&e.bbox)?;
                view.apply(&in_frame)
            }
        }
    }
}

impl<I: ?Sized> DetectorBackend<I> for ScriptedBackend {
    fn spec(&self) -> &DetectorSpec {
        &self.spec
    }

    fn infer(&mut self, request: &DetectRequest<'_, I>) -> Result<Vec<Detection>, DetectError> {
        Ok(self
            .entries(request.frame_index)
            .iter()
            .filter_map(|e| {
                let bbox = self.place(e, request.source_size, request.view)?;
                Some(Detection {
                    label: e.label.clone(),
                    bbox,
                    score: e.score,
                })
            })
            .collect())
    }
}
