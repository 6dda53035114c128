//! Turning tracked frame results into unique violation records.
//!
//! Single-step: one record per confirmed phone track. Two-step: one record
//! per confirmed windscreen track, created the first time a phone is seen
//! inside it. Sightings on a gating track that is still tentative are
//! buffered until it confirms; if it is deleted first, the sighting is
//! dropped (and, in two-step mode, counted).

use std::collections::{BTreeMap, HashMap, HashSet};

use image::RgbImage;
use log::warn;
use phonewatch_core::detect::ClassLabel;
use phonewatch_core::track::TrackId;
use serde::{Deserialize, Serialize};

use super::overlay::draw_overlay;
use super::{DedupKey, NewViolation, Store, StoreError, ViolationRecord};
use crate::frames::Frame;
use crate::pipeline::{FrameResult, FrameSink, PipelineMode};
use crate::timestamp::Timestamp;

/// Which frame a record's snapshot shows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotPolicy {
    /// The highest-scoring sighting so far; replaced as the score rises.
    #[default]
    BestScore,
    /// The first sighting, written once.
    First,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub frames: u64,
    pub violations_created: u64,
    pub violations_updated: u64,
    pub vehicles: u64,
    /// Two-step phone sightings whose windscreen never confirmed.
    pub dropped: u64,
    pub store_errors: u64,
}

struct Sighting {
    frame_index: u64,
    at: Timestamp,
    score: f64,
    phone_track_id: u64,
    image: RgbImage,
}

struct Buffered {
    first: Sighting,
    /// Highest-scoring sighting after the first, if it beat the first.
    best: Option<Sighting>,
    last_seen: Timestamp,
}

impl Buffered {
    fn max_score(&self) -> f64 {
        self.best
            .as_ref()
            .map_or(self.first.score, |b| b.score.max(self.first.score))
    }
}

pub struct ViolationLogger {
    store: Store,
    stream_id: String,
    mode: PipelineMode,
    policy: SnapshotPolicy,
    births: HashMap<TrackId, Timestamp>,
    counted: HashSet<TrackId>,
    pending: BTreeMap<u64, Buffered>,
    stats: IngestStats,
    first_error: Option<StoreError>,
}

impl ViolationLogger {
    /// Registers the stream with the store (its vehicle basis follows the
    /// mode).
    pub fn new(
        store: Store,
        stream_id: &str,
        mode: PipelineMode,
        policy: SnapshotPolicy,
    ) -> Result<Self, StoreError> {
        store.register_stream(stream_id, mode.vehicle_basis())?;
        Ok(Self {
            store,
            stream_id: stream_id.to_string(),
            mode,
            policy,
            births: HashMap::new(),
            counted: HashSet::new(),
            pending: BTreeMap::new(),
            stats: IngestStats::default(),
            first_error: None,
        })
    }

    /// Highest track id already persisted for this stream; the tracker
    /// must continue after it so old records are never matched by new
    /// tracks.
    pub fn resume_point(&self) -> Option<TrackId> {
        self.store
            .state()
            .stream(&self.stream_id)
            .map(|s| s.max_track_id)
            .filter(|&m| m > 0)
            .map(TrackId)
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    /// First store error met while used as a [`FrameSink`].
    pub fn take_error(&mut self) -> Option<StoreError> {
        self.first_error.take()
    }

    fn key(&self, gate: u64) -> DedupKey {
        match self.mode {
            PipelineMode::SingleStep => DedupKey::Phone(gate),
            PipelineMode::TwoStep => DedupKey::Windscreen(gate),
        }
    }

    /// Returns the records created or updated by this frame.
    pub fn ingest(
        &mut self,
        result: &FrameResult,
        frame: &RgbImage,
    ) -> Result<Vec<ViolationRecord>, StoreError> {
        self.stats.frames += 1;
        let at = result.timestamp;
        for d in &result.detections {
            if let Some(id) = d.track_id {
                self.births.entry(id).or_insert(at);
            }
        }

        let basis = self.mode.vehicle_basis();
        for t in result.confirmed_of(&basis) {
            if self.counted.insert(t.id) {
                let first_seen = self.births.get(&t.id).copied().unwrap_or(at);
                if self
                    .store
                    .record_vehicle(&self.stream_id, t.id.0, basis.clone(), first_seen)?
                {
                    self.stats.vehicles += 1;
                }
            }
        }

        // Best phone sighting per gating track this frame.
        let mut sightings: BTreeMap<u64, (f64, u64)> = BTreeMap::new();
        for d in result.of_label(ClassLabel::PHONE) {
            let Some(phone) = d.track_id else { continue };
            let gate = match self.mode {
                PipelineMode::SingleStep => phone.0,
                PipelineMode::TwoStep => match d.windscreen_track_id {
                    Some(w) => w.0,
                    None => continue,
                },
            };
            let e = sightings.entry(gate).or_insert((d.score, phone.0));
            if d.score > e.0 {
                *e = (d.score, phone.0);
            }
        }

        let mut overlay: Option<RgbImage> = None;
        let mut overlay_image = || {
            overlay
                .get_or_insert_with(|| draw_overlay(frame, &result.detections))
                .clone()
        };
        let mut changed = Vec::new();
        let state = self.store.state();
        for (&gate, &(score, phone)) in &sightings {
            if let Some(rec) = state.find(&self.stream_id, self.key(gate)) {
                let replace = rec.snapshot_pending()
                    || (self.policy == SnapshotPolicy::BestScore && score > rec.max_score);
                let image = replace.then(&mut overlay_image);
                let updated =
                    self.store
                        .observe_violation(rec.violation_id, at, score, image.as_ref())?;
                if updated.revision != rec.revision {
                    self.stats.violations_updated += 1;
                    changed.push(updated);
                }
                continue;
            }
            match self.pending.get_mut(&gate) {
                None => {
                    self.pending.insert(
                        gate,
                        Buffered {
                            first: Sighting {
                                frame_index: result.frame_index,
                                at,
                                score,
                                phone_track_id: phone,
                                image: overlay_image(),
                            },
                            best: None,
                            last_seen: at,
                        },
                    );
                }
                Some(buf) => {
                    buf.last_seen = at;
                    if self.policy == SnapshotPolicy::BestScore && score > buf.max_score() {
                        buf.best = Some(Sighting {
                            frame_index: result.frame_index,
                            at,
                            score,
                            phone_track_id: phone,
                            image: overlay_image(),
                        });
                    } else if score > buf.max_score() {
                        // first-frame policy: keep the image, track the score
                        buf.first.score = buf.first.score.max(score);
                    }
                }
            }
        }

        let ready: Vec<u64> = self
            .pending
            .keys()
            .copied()
            .filter(|&g| result.is_confirmed(TrackId(g)))
            .collect();
        for gate in ready {
            let buf = self.pending.remove(&gate).expect("key listed above");
            let max_score = buf.max_score();
            let image = match (&self.policy, &buf.best) {
                (SnapshotPolicy::BestScore, Some(best)) if best.score > buf.first.score => {
                    &best.image
                }
                _ => &buf.first.image,
            };
            let record = self.store.create_violation(
                NewViolation {
                    stream_id: self.stream_id.clone(),
                    phone_track_id: buf.first.phone_track_id,
                    windscreen_track_id: (self.mode == PipelineMode::TwoStep).then_some(gate),
                    first_seen: buf.first.at,
                    last_seen: buf.last_seen,
                    frame_index_first: buf.first.frame_index,
                    max_score,
                },
                Some(image),
            )?;
            self.stats.violations_created += 1;
            changed.push(record);
        }

        for t in &result.deleted {
            self.births.remove(&t.id);
            self.counted.remove(&t.id);
            if let Some(buf) = self.pending.remove(&t.id.0) {
                if self.mode == PipelineMode::TwoStep {
                    self.stats.dropped += 1;
                    self.store.record_dropped(
                        &self.stream_id,
                        t.id.0,
                        buf.first.phone_track_id,
                        at,
                    )?;
                }
            }
        }
        Ok(changed)
    }
}

impl FrameSink for ViolationLogger {
    fn on_frame(&mut self, result: &FrameResult, frame: &Frame) {
        if let Err(e) = self.ingest(result, &frame.image) {
            warn!("frame {}: storing violations: {e}", result.frame_index);
            self.stats.store_errors += 1;
            if self.first_error.is_none() {
                self.first_error = Some(e);
            }
        }
    }
}
