//! Tracking-by-detection: persistent identities across frames.
//!
//! Each frame runs predict → associate → update/spawn → lifecycle. Matching
//! is an exact maximum-affinity assignment (IoU by default) restricted to
//! same-label pairs at or above the gate. Tracks of different classes share
//! one ID counter per stream, so an ID names one object regardless of class.

mod assignment;
mod kalman;

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

pub use assignment::{max_weight_assignment, WeightMatrix};
pub use kalman::{measurement_of, KalmanFilter, KalmanParams, TrackState};

use crate::detect::{ClassLabel, Detection};
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrackId(pub u64);

impl fmt::Display for TrackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrackError {
    #[error("frame index {got} does not follow previous frame {previous}")]
    OutOfSequence { previous: u64, got: u64 },
    #[error("invalid tracker config: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// A track is deleted once it has gone unmatched for more than this many
    /// consecutive frames.
    pub max_age: u32,
    /// Matched frames needed before a track is confirmed.
    pub n_init: u32,
    /// Minimum affinity (IoU by default) for a track/detection pair.
    pub gate_iou: f64,
    /// Only associate detections with tracks of the same label.
    pub per_class: bool,
    pub kalman: KalmanParams,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            max_age: 30,
            n_init: 3,
            gate_iou: 0.3,
            per_class: true,
            kalman: KalmanParams::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        if self.max_age < 1 {
            return Err(TrackError::Config("max_age must be at least 1"));
        }
        if self.n_init < 1 {
            return Err(TrackError::Config("n_init must be at least 1"));
        }
        if !(self.gate_iou > 0.0 && self.gate_iou < 1.0) {
            return Err(TrackError::Config("gate_iou must lie in (0, 1)"));
        }
        let KalmanParams {
            std_weight_position: p,
            std_weight_velocity: v,
        } = self.kalman;
        if !(p.is_finite() && p > 0.0 && v.is_finite() && v > 0.0) {
            return Err(TrackError::Config("Kalman noise weights must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: TrackId,
    pub label: ClassLabel,
    pub state: TrackState,
    pub status: TrackStatus,
    /// Frames since creation.
    pub age: u64,
    /// Consecutive unmatched frames.
    pub misses: u32,
    /// Total matched frames.
    pub hits: u32,
    /// Last matched detection score.
    pub score: f64,
}

impl Track {
    pub fn bbox(&self) -> BBox {
        self.state.to_bbox()
    }

    pub fn is_confirmed(&self) -> bool {
        self.status == TrackStatus::Confirmed
    }
}

/// Snapshot of a track as reported to callers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackView {
    pub id: TrackId,
    pub label: ClassLabel,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub status: TrackStatus,
    pub hits: u32,
    pub misses: u32,
    pub age: u64,
}

impl From<&Track> for TrackView {
    fn from(t: &Track) -> Self {
        TrackView {
            id: t.id,
            label: t.label.clone(),
            bbox: t.bbox(),
            status: t.status,
            hits: t.hits,
            misses: t.misses,
            age: t.age,
        }
    }
}

/// Scores a predicted track box against a detection. Higher is better; the
/// gate is applied to this value. The default is plain IoU; appearance
/// models plug in here.
pub trait Affinity {
    fn affinity(&self, track: TrackId, predicted: &BBox, detection: &Detection) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IouAffinity;

impl Affinity for IouAffinity {
    fn affinity(&self, _track: TrackId, predicted: &BBox, detection: &Detection) -> f64 {
        iou(predicted, &detection.bbox)
    }
}

/// A predicted track as seen by [`associate`].
#[derive(Debug, Clone)]
pub struct Candidate {
    pub id: TrackId,
    pub label: ClassLabel,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Association {
    /// `(candidate index, detection index)`, sorted by candidate.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Optimal one-to-one assignment maximizing total affinity, with every pair
/// at or above `config.gate_iou`. Candidates should be ordered by track ID;
/// ties go to the earlier candidate.
pub fn associate<A: Affinity + ?Sized>(
    candidates: &[Candidate],
    detections: &[Detection],
    config: &TrackerConfig,
    affinity: &A,
) -> Association {
    let mut m = WeightMatrix::new(candidates.len(), detections.len());
    for (ti, t) in candidates.iter().enumerate() {
        for (di, d) in detections.iter().enumerate() {
            if config.per_class && t.label != d.label {
                continue;
            }
            let a = affinity.affinity(t.id, &t.bbox, d);
            if a >= config.gate_iou {
                m.allow(ti, di, a);
            }
        }
    }
    let matches = max_weight_assignment(&m);
    let mut track_hit = alloc::vec![false; candidates.len()];
    let mut det_hit = alloc::vec![false; detections.len()];
    for &(t, d) in &matches {
        track_hit[t] = true;
        det_hit[d] = true;
    }
    Association {
        unmatched_tracks: (0..candidates.len()).filter(|&i| !track_hit[i]).collect(),
        unmatched_detections: (0..detections.len()).filter(|&i| !det_hit[i]).collect(),
        matches,
    }
}

/// Result of one [`Tracker::step`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutput {
    /// Every confirmed track after this frame, including ones coasting
    /// through a miss. Sorted by ID.
    pub confirmed: Vec<TrackView>,
    /// Track each input detection was attached to (matched or newly
    /// spawned), index-aligned with the input.
    pub detection_tracks: Vec<TrackId>,
    /// Tracks removed during this frame.
    pub deleted: Vec<TrackView>,
}

impl StepOutput {
    pub fn is_confirmed(&self, id: TrackId) -> bool {
        self.confirmed.binary_search_by_key(&id, |t| t.id).is_ok()
    }
}

/// Single-stream tracker. Not shareable across streams; calls to
/// [`Tracker::step`] must be serialized.
#[derive(Debug, Clone)]
pub struct Tracker<A = IouAffinity> {
    config: TrackerConfig,
    filter: KalmanFilter,
    tracks: Vec<Track>,
    next_id: u64,
    last_frame: Option<u64>,
    affinity: A,
}

impl Tracker<IouAffinity> {
    pub fn new(config: TrackerConfig) -> Result<Self, TrackError> {
        Self::with_affinity(config, IouAffinity)
    }
}

impl<A: Affinity> Tracker<A> {
    pub fn with_affinity(config: TrackerConfig, affinity: A) -> Result<Self, TrackError> {
        config.validate()?;
        Ok(Self {
            config,
            filter: KalmanFilter::new(config.kalman),
            tracks: Vec::new(),
            next_id: 1,
            last_frame: None,
            affinity,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Makes new IDs start after `last`, so a stream resumed after a restart
    /// never reuses an ID handed out before it.
    pub fn resume_after(&mut self, last: TrackId) {
        self.next_id = self.next_id.max(last.0 + 1);
    }

    /// Live (tentative and confirmed) tracks, ordered by ID.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Advances every track `dt` frames. Misses are not touched.
    pub fn predict(&mut self, dt: u64) {
        let dt = dt.max(1);
        for t in &mut self.tracks {
            self.filter.predict(&mut t.state, dt);
            t.age += dt;
        }
    }

    pub fn step(
        &mut self,
        frame_index: u64,
        detections: &[Detection],
    ) -> Result<StepOutput, TrackError> {
        let dt = match self.last_frame {
            Some(prev) if frame_index <= prev => {
                return Err(TrackError::OutOfSequence {
                    previous: prev,
                    got: frame_index,
                })
            }
            Some(prev) => frame_index - prev,
            None => 1,
        };
        self.last_frame = Some(frame_index);
        self.predict(dt);

        let candidates: Vec<Candidate> = self
            .tracks
            .iter()
            .map(|t| Candidate {
                id: t.id,
                label: t.label.clone(),
                bbox: t.bbox(),
            })
            .collect();
        let assoc = associate(&candidates, detections, &self.config, &self.affinity);

        let mut detection_tracks: Vec<Option<TrackId>> = alloc::vec![None; detections.len()];
        for &(ti, di) in &assoc.matches {
            let t = &mut self.tracks[ti];
            let d = &detections[di];
            self.filter.update(&mut t.state, &d.bbox);
            t.hits += 1;
            t.misses = 0;
            t.score = d.score;
            if t.status == TrackStatus::Tentative && t.hits >= self.config.n_init {
                t.status = TrackStatus::Confirmed;
            }
            detection_tracks[di] = Some(t.id);
        }

        let mut deleted = Vec::new();
        let unmatched: BTreeSet<usize> = assoc.unmatched_tracks.iter().copied().collect();
        for (i, t) in self.tracks.iter_mut().enumerate() {
            if unmatched.contains(&i) {
                t.misses += 1;
                if t.misses > self.config.max_age {
                    t.status = TrackStatus::Deleted;
                    deleted.push(TrackView::from(&*t));
                }
            }
        }
        self.tracks.retain(|t| t.status != TrackStatus::Deleted);

        for &di in &assoc.unmatched_detections {
            let d = &detections[di];
            let id = TrackId(self.next_id);
            self.next_id += 1;
            let status = if self.config.n_init <= 1 {
                TrackStatus::Confirmed
            } else {
                TrackStatus::Tentative
            };
            self.tracks.push(Track {
                id,
                label: d.label.clone(),
                state: self.filter.initiate(&d.bbox),
                status,
                age: 0,
                misses: 0,
                hits: 1,
                score: d.score,
            });
            detection_tracks[di] = Some(id);
        }

        Ok(StepOutput {
            confirmed: self
                .tracks
                .iter()
                .filter(|t| t.is_confirmed())
                .map(TrackView::from)
                .collect(),
            detection_tracks: detection_tracks
                .into_iter()
                .map(|t| t.expect("every detection is matched or spawns a track"))
                .collect(),
            deleted,
        })
    }
}
