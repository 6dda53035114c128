//! Violation records, vehicle counts and review state.
//!
//! Everything is persisted as two append-only JSON-lines logs plus a
//! snapshot directory:
//!
//! * `violations.jsonl` — one full [`ViolationRecord`] per line; a line with
//!   a higher `revision` supersedes earlier lines for the same id.
//! * `events.jsonl` — stream registrations, vehicle sightings, dropped
//!   phone events and the review audit trail.
//! * `snapshots/<stream_id>_<violation_id>.png`
//!
//! State is rebuilt by replaying the logs on open. A torn final line (a
//! crash mid-write) is cut off; any other unreadable line is an error.
//! Writes go through one mutex; readers take an `Arc` of the last
//! published [`StoreState`] and never block the writer.

mod ingest;
mod overlay;

pub use ingest::{IngestStats, SnapshotPolicy, ViolationLogger};
pub use overlay::draw_overlay;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use chrono::Duration;
use image::RgbImage;
use log::warn;
use phonewatch_core::detect::ClassLabel;
use serde::{Deserialize, Serialize};

use crate::timestamp::Timestamp;

pub const VIOLATIONS_LOG: &str = "violations.jsonl";
pub const EVENTS_LOG: &str = "events.jsonl";
pub const SNAPSHOT_DIR: &str = "snapshots";
/// `snapshot_ref` of a record whose snapshot could not be written yet.
pub const PENDING_RETRY: &str = "pending-retry";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("violation {0} not found")]
    NotFound(u64),
    #[error("violation {id} is already {status}")]
    Conflict { id: u64, status: ReviewStatus },
    #[error("unknown stream `{0}`")]
    UnknownStream(String),
    #[error("invalid stream id `{0}`: use letters, digits, '.', '_' or '-'")]
    BadStreamId(String),
    #[error("invalid window: {0}")]
    BadWindow(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn valid_stream_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
        && !id.starts_with('.')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewStatus {
    Pending,
    Confirmed,
    Dismissed,
}

impl std::fmt::Display for ReviewStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReviewStatus::Pending => "pending",
            ReviewStatus::Confirmed => "confirmed",
            ReviewStatus::Dismissed => "dismissed",
        })
    }
}

impl std::str::FromStr for ReviewStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(ReviewStatus::Pending),
            "confirmed" => Ok(ReviewStatus::Confirmed),
            "dismissed" => Ok(ReviewStatus::Dismissed),
            other => Err(format!("unknown status `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Confirmed,
    Dismissed,
}

impl From<Decision> for ReviewStatus {
    fn from(d: Decision) -> Self {
        match d {
            Decision::Confirmed => ReviewStatus::Confirmed,
            Decision::Dismissed => ReviewStatus::Dismissed,
        }
    }
}

/// One unique phone-use event. Field order is the log line layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViolationRecord {
    pub violation_id: u64,
    pub stream_id: String,
    pub phone_track_id: u64,
    /// Set in two-step mode, where it is the deduplication key.
    pub windscreen_track_id: Option<u64>,
    pub first_seen: Timestamp,
    pub last_seen: Timestamp,
    pub frame_index_first: u64,
    /// Path relative to the store directory, or [`PENDING_RETRY`].
    pub snapshot_ref: String,
    pub max_score: f64,
    pub review_status: ReviewStatus,
    pub reviewer_note: Option<String>,
    pub revision: u64,
}

impl ViolationRecord {
    pub fn snapshot_pending(&self) -> bool {
        self.snapshot_ref == PENDING_RETRY
    }

    /// Deduplication key: the windscreen track in two-step mode, the phone
    /// track otherwise.
    pub fn dedup_key(&self) -> DedupKey {
        match self.windscreen_track_id {
            Some(w) => DedupKey::Windscreen(w),
            None => DedupKey::Phone(self.phone_track_id),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DedupKey {
    Phone(u64),
    Windscreen(u64),
}

/// A distinct confirmed licence-plate or windscreen track.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VehicleEntry {
    pub stream_id: String,
    pub track_id: u64,
    pub basis: ClassLabel,
    pub first_seen: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub violation_id: u64,
    pub decision: Decision,
    pub note: Option<String>,
    pub at: Timestamp,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
enum Event {
    Stream {
        stream_id: String,
        basis: ClassLabel,
        at: Timestamp,
    },
    Vehicle {
        stream_id: String,
        track_id: u64,
        basis: ClassLabel,
        first_seen: Timestamp,
    },
    Dropped {
        stream_id: String,
        windscreen_track_id: u64,
        phone_track_id: u64,
        at: Timestamp,
    },
    Review {
        violation_id: u64,
        decision: Decision,
        note: Option<String>,
        at: Timestamp,
        revision: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StreamInfo {
    /// Class whose tracks count vehicles on this stream.
    pub basis: ClassLabel,
    /// Highest track id persisted for the stream; a restarted tracker
    /// continues after it.
    pub max_track_id: u64,
    /// Phone events dropped because their windscreen track never confirmed.
    pub dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VehicleCount {
    pub stream_id: String,
    pub from: Timestamp,
    pub to: Timestamp,
    pub count: u64,
    pub basis: ClassLabel,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ListQuery {
    pub status: Option<ReviewStatus>,
    pub from: Option<Timestamp>,
    pub to: Option<Timestamp>,
    pub stream_id: Option<String>,
    /// 1-based.
    pub page: usize,
    pub page_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Page {
    pub items: Vec<ViolationRecord>,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub total_pages: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Hour,
    Day,
}

impl Bucket {
    pub fn length(&self) -> Duration {
        match self {
            Bucket::Hour => Duration::hours(1),
            Bucket::Day => Duration::days(1),
        }
    }
}

impl std::str::FromStr for Bucket {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hour" => Ok(Bucket::Hour),
            "day" => Ok(Bucket::Day),
            other => Err(format!("unknown bucket `{other}` (expected hour or day)")),
        }
    }
}

pub const MAX_BUCKETS: i64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsSummary {
    pub from: Timestamp,
    pub to: Timestamp,
    pub violations_total: u64,
    pub violations_pending: u64,
    pub violations_confirmed: u64,
    pub violations_dismissed: u64,
    pub vehicles: u64,
    /// `violations_total / max(vehicles, 1)`.
    pub violation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsBucket {
    pub start: Timestamp,
    pub end: Timestamp,
    pub violations: u64,
    pub vehicles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stats {
    pub summary: StatsSummary,
    pub bucket: Bucket,
    pub buckets: Vec<StatsBucket>,
}

fn check_window(from: Timestamp, to: Timestamp) -> Result<(), StoreError> {
    if from > to {
        return Err(StoreError::BadWindow(format!(
            "from {from} is after to {to}"
        )));
    }
    Ok(())
}

fn in_window(t: Timestamp, from: Option<Timestamp>, to: Option<Timestamp>) -> bool {
    from.is_none_or(|f| t >= f) && to.is_none_or(|e| t < e)
}

/// An immutable view of the store. Windows are half-open `[from, to)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StoreState {
    records: BTreeMap<u64, Arc<ViolationRecord>>,
    keys: BTreeMap<(String, DedupKey), u64>,
    vehicles: BTreeMap<(String, u64), VehicleEntry>,
    streams: BTreeMap<String, StreamInfo>,
    audit: Vec<AuditEntry>,
}

impl StoreState {
    pub fn get(&self, id: u64) -> Option<&ViolationRecord> {
        self.records.get(&id).map(|r| r.as_ref())
    }

    /// All records in id order.
    pub fn records(&self) -> impl Iterator<Item = &ViolationRecord> {
        self.records.values().map(|r| r.as_ref())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn find(&self, stream_id: &str, key: DedupKey) -> Option<&ViolationRecord> {
        self.keys
            .get(&(stream_id.to_string(), key))
            .and_then(|id| self.get(*id))
    }

    pub fn stream(&self, stream_id: &str) -> Option<&StreamInfo> {
        self.streams.get(stream_id)
    }

    pub fn streams(&self) -> impl Iterator<Item = (&str, &StreamInfo)> {
        self.streams.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn vehicles(&self) -> impl Iterator<Item = &VehicleEntry> {
        self.vehicles.values()
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    fn next_id(&self) -> u64 {
        self.records.keys().next_back().map_or(1, |id| id + 1)
    }

    /// Vehicles of the stream's basis class.
    fn counted_vehicles<'a>(
        &'a self,
        stream_id: Option<&'a str>,
    ) -> impl Iterator<Item = &'a VehicleEntry> {
        self.vehicles.values().filter(move |v| {
            stream_id.is_none_or(|s| v.stream_id == s)
                && self
                    .streams
                    .get(&v.stream_id)
                    .is_some_and(|info| info.basis == v.basis)
        })
    }

    pub fn vehicle_count(
        &self,
        stream_id: &str,
        from: Timestamp,
        to: Timestamp,
    ) -> Result<VehicleCount, StoreError> {
        check_window(from, to)?;
        let info = self
            .streams
            .get(stream_id)
            .ok_or_else(|| StoreError::UnknownStream(stream_id.to_string()))?;
        let count = self
            .counted_vehicles(Some(stream_id))
            .filter(|v| in_window(v.first_seen, Some(from), Some(to)))
            .count() as u64;
        Ok(VehicleCount {
            stream_id: stream_id.to_string(),
            from,
            to,
            count,
            basis: info.basis.clone(),
        })
    }

    /// Records matching the filters, newest `first_seen` first (ties by
    /// descending id).
    pub fn list(&self, q: &ListQuery) -> Result<Page, StoreError> {
        if let (Some(f), Some(t)) = (q.from, q.to) {
            check_window(f, t)?;
        }
        let page = q.page.max(1);
        let page_size = q.page_size.max(1);
        let mut hits: Vec<&ViolationRecord> = self
            .records()
            .filter(|r| q.status.is_none_or(|s| r.review_status == s))
            .filter(|r| q.stream_id.as_deref().is_none_or(|s| r.stream_id == s))
            .filter(|r| in_window(r.first_seen, q.from, q.to))
            .collect();
        hits.sort_by(|a, b| {
            b.first_seen
                .cmp(&a.first_seen)
                .then(b.violation_id.cmp(&a.violation_id))
        });
        let total = hits.len();
        let items = hits
            .into_iter()
            .skip((page - 1).saturating_mul(page_size))
            .take(page_size)
            .cloned()
            .collect();
        Ok(Page {
            items,
            page,
            page_size,
            total,
            total_pages: total.div_ceil(page_size),
        })
    }

    /// Window totals plus per-bucket counts. Buckets start at `from`; the
    /// last one is cut at `to`.
    pub fn stats(
        &self,
        from: Timestamp,
        to: Timestamp,
        bucket: Bucket,
        stream_id: Option<&str>,
    ) -> Result<Stats, StoreError> {
        check_window(from, to)?;
        let len = bucket.length();
        let span = to.millis() - from.millis();
        let n = (span + len.num_milliseconds() - 1) / len.num_milliseconds();
        if n > MAX_BUCKETS {
            return Err(StoreError::BadWindow(format!(
                "{n} buckets exceed the limit of {MAX_BUCKETS}"
            )));
        }
        let mut buckets: Vec<StatsBucket> = (0..n)
            .map(|i| {
                let start = from.plus(len * i as i32);
                let end = start.plus(len).min(to);
                StatsBucket {
                    start,
                    end,
                    violations: 0,
                    vehicles: 0,
                }
            })
            .collect();
        let slot = |t: Timestamp| ((t.millis() - from.millis()) / len.num_milliseconds()) as usize;

        let mut summary = StatsSummary {
            from,
            to,
            violations_total: 0,
            violations_pending: 0,
            violations_confirmed: 0,
            violations_dismissed: 0,
            vehicles: 0,
            violation_rate: 0.0,
        };
        for r in self.records() {
            if stream_id.is_some_and(|s| r.stream_id != s)
                || !in_window(r.first_seen, Some(from), Some(to))
            {
                continue;
            }
            summary.violations_total += 1;
            match r.review_status {
                ReviewStatus::Pending => summary.violations_pending += 1,
                ReviewStatus::Confirmed => summary.violations_confirmed += 1,
                ReviewStatus::Dismissed => summary.violations_dismissed += 1,
            }
            buckets[slot(r.first_seen)].violations += 1;
        }
        for v in self.counted_vehicles(stream_id) {
            if in_window(v.first_seen, Some(from), Some(to)) {
                summary.vehicles += 1;
                buckets[slot(v.first_seen)].vehicles += 1;
            }
        }
        summary.violation_rate = summary.violations_total as f64 / summary.vehicles.max(1) as f64;
        Ok(Stats {
            summary,
            bucket,
            buckets,
        })
    }

    /// Canonical serialization of the records, vehicles and streams, for
    /// comparing states.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for r in self.records() {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        for v in self.vehicles.values() {
            out.push_str(&serde_json::to_string(v).expect("vehicle serializes"));
            out.push('\n');
        }
        for (id, s) in &self.streams {
            out.push_str(&format!(
                "{id} {} {} {}\n",
                s.basis, s.max_track_id, s.dropped
            ));
        }
        out
    }

    fn bump_track(&mut self, stream_id: &str, track_id: u64) {
        if let Some(info) = self.streams.get_mut(stream_id) {
            info.max_track_id = info.max_track_id.max(track_id);
        }
    }

    fn stream_entry(&mut self, stream_id: &str) -> &mut StreamInfo {
        self.streams
            .entry(stream_id.to_string())
            .or_insert_with(|| StreamInfo {
                basis: ClassLabel::windscreen(),
                max_track_id: 0,
                dropped: 0,
            })
    }

    /// Applies a record line; lower or equal revisions are ignored.
    fn apply_record(&mut self, r: ViolationRecord) {
        if self
            .records
            .get(&r.violation_id)
            .is_some_and(|old| old.revision >= r.revision)
        {
            return;
        }
        self.stream_entry(&r.stream_id);
        self.bump_track(&r.stream_id, r.phone_track_id);
        if let Some(w) = r.windscreen_track_id {
            self.bump_track(&r.stream_id, w);
        }
        self.keys
            .insert((r.stream_id.clone(), r.dedup_key()), r.violation_id);
        self.records.insert(r.violation_id, Arc::new(r));
    }

    fn apply_event(&mut self, e: Event) {
        match e {
            Event::Stream {
                stream_id, basis, ..
            } => {
                self.stream_entry(&stream_id).basis = basis;
            }
            Event::Vehicle {
                stream_id,
                track_id,
                basis,
                first_seen,
            } => {
                self.stream_entry(&stream_id);
                self.bump_track(&stream_id, track_id);
                self.vehicles
                    .entry((stream_id.clone(), track_id))
                    .or_insert(VehicleEntry {
                        stream_id,
                        track_id,
                        basis,
                        first_seen,
                    });
            }
            Event::Dropped {
                stream_id,
                windscreen_track_id,
                phone_track_id,
                ..
            } => {
                self.stream_entry(&stream_id).dropped += 1;
                self.bump_track(&stream_id, windscreen_track_id.max(phone_track_id));
            }
            Event::Review {
                violation_id,
                decision,
                note,
                at,
                revision,
            } => self.audit.push(AuditEntry {
                violation_id,
                decision,
                note,
                at,
                revision,
            }),
        }
    }
}

/// Fields of a violation at creation time.
#[derive(Debug, Clone, PartialEq)]
pub struct NewViolation {
    pub stream_id: String,
    pub phone_track_id: u64,
    pub windscreen_track_id: Option<u64>,
    pub first_seen: Timestamp,
    pub last_seen: Timestamp,
    pub frame_index_first: u64,
    pub max_score: f64,
}

struct Writer {
    violations: File,
    events: File,
    state: StoreState,
    /// Overlay images of records whose snapshot write failed.
    retry: HashMap<u64, RgbImage>,
}

struct Inner {
    dir: PathBuf,
    writer: Mutex<Writer>,
    published: RwLock<Arc<StoreState>>,
}

/// Handle to an open store; clones share it.
#[derive(Clone)]
pub struct Store {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("dir", &self.inner.dir)
            .finish()
    }
}

/// Reads every complete line of a JSON-lines log. A final line without a
/// newline that does not parse is a torn write and is truncated away.
fn replay_log<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, StoreError> {
    let mut file = match OpenOptions::new().read(true).write(true).open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut text = String::new();
    file.read_to_string(&mut text).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut offset = 0usize;
    for (n, line) in text.split_inclusive('\n').enumerate() {
        let complete = line.ends_with('\n');
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.trim().is_empty() {
            match serde_json::from_str(body) {
                Ok(v) => out.push(v),
                Err(_) if !complete => {
                    warn!("{}: dropping torn final line {}", path.display(), n + 1);
                    file.set_len(offset as u64).map_err(io_err(path))?;
                    return Ok(out);
                }
                Err(e) => {
                    return Err(StoreError::Corrupt {
                        path: path.to_path_buf(),
                        line: n + 1,
                        message: e.to_string(),
                    })
                }
            }
        }
        if !complete {
            file.seek(SeekFrom::End(0)).map_err(io_err(path))?;
            file.write_all(b"\n").map_err(io_err(path))?;
        }
        offset += line.len();
    }
    Ok(out)
}

fn append_line<T: Serialize>(file: &mut File, path: &Path, value: &T) -> Result<(), StoreError> {
    let mut line = serde_json::to_string(value).expect("log entries serialize");
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(io_err(path))
}

impl Store {
    /// Opens (creating if needed) the store in `dir` and replays its logs.
    pub fn open(dir: &Path) -> Result<Store, StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let snapshots = dir.join(SNAPSHOT_DIR);
        if !snapshots.exists() {
            fs::create_dir_all(&snapshots).map_err(io_err(&snapshots))?;
        }
        let vpath = dir.join(VIOLATIONS_LOG);
        let epath = dir.join(EVENTS_LOG);
        let mut state = StoreState::default();
        for e in replay_log::<Event>(&epath)? {
            state.apply_event(e);
        }
        for r in replay_log::<ViolationRecord>(&vpath)? {
            state.apply_record(r);
        }
        let open = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(io_err(p))
        };
        let writer = Writer {
            violations: open(&vpath)?,
            events: open(&epath)?,
            state: state.clone(),
            retry: HashMap::new(),
        };
        Ok(Store {
            inner: Arc::new(Inner {
                dir: dir.to_path_buf(),
                writer: Mutex::new(writer),
                published: RwLock::new(Arc::new(state)),
            }),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.inner.dir
    }

    /// The current state. Cheap; never waits for the writer.
    pub fn state(&self) -> Arc<StoreState> {
        self.inner
            .published
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    pub fn snapshot_path(&self, record: &ViolationRecord) -> Option<PathBuf> {
        (!record.snapshot_pending()).then(|| self.inner.dir.join(&record.snapshot_ref))
    }

    fn lock(&self) -> MutexGuard<'_, Writer> {
        self.inner.writer.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn publish(&self, w: &Writer) {
        *self
            .inner
            .published
            .write()
            .unwrap_or_else(|e| e.into_inner()) = Arc::new(w.state.clone());
    }

    fn write_event(&self, w: &mut Writer, e: Event) -> Result<(), StoreError> {
        let path = self.inner.dir.join(EVENTS_LOG);
        append_line(&mut w.events, &path, &e)?;
        w.state.apply_event(e);
        Ok(())
    }

    fn write_record(&self, w: &mut Writer, r: ViolationRecord) -> Result<(), StoreError> {
        let path = self.inner.dir.join(VIOLATIONS_LOG);
        append_line(&mut w.violations, &path, &r)?;
        w.state.apply_record(r);
        Ok(())
    }

    /// Writes the snapshot atomically (temp file + rename) and returns its
    /// relative path.
    fn write_snapshot(
        &self,
        stream_id: &str,
        id: u64,
        image: &RgbImage,
    ) -> Result<String, StoreError> {
        let rel = format!("{SNAPSHOT_DIR}/{stream_id}_{id}.png");
        let path = self.inner.dir.join(&rel);
        let tmp = path.with_extension("png.tmp");
        let parent = self.inner.dir.join(SNAPSHOT_DIR);
        fs::create_dir_all(&parent).map_err(io_err(&parent))?;
        image
            .save_with_format(&tmp, image::ImageFormat::Png)
            .map_err(|e| StoreError::Io {
                path: tmp.clone(),
                source: io::Error::other(e),
            })?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(rel)
    }

    fn snapshot_or_retry(
        &self,
        w: &mut Writer,
        stream_id: &str,
        id: u64,
        image: &RgbImage,
    ) -> String {
        match self.write_snapshot(stream_id, id, image) {
            Ok(rel) => {
                w.retry.remove(&id);
                rel
            }
            Err(e) => {
                warn!("snapshot for violation {id}: {e}; marked {PENDING_RETRY}");
                w.retry.insert(id, image.clone());
                PENDING_RETRY.to_string()
            }
        }
    }

    /// Declares a stream and the class its vehicles are counted by.
    pub fn register_stream(
        &self,
        stream_id: &str,
        basis: ClassLabel,
    ) -> Result<StreamInfo, StoreError> {
        if !valid_stream_id(stream_id) {
            return Err(StoreError::BadStreamId(stream_id.to_string()));
        }
        let mut w = self.lock();
        if w.state
            .streams
            .get(stream_id)
            .is_none_or(|s| s.basis != basis)
        {
            self.write_event(
                &mut w,
                Event::Stream {
                    stream_id: stream_id.to_string(),
                    basis,
                    at: Timestamp::now(),
                },
            )?;
            self.publish(&w);
        }
        Ok(w.state.streams[stream_id].clone())
    }

    /// Creates a record; the snapshot is written before the record line so
    /// a persisted `snapshot_ref` always names an existing file.
    pub fn create_violation(
        &self,
        new: NewViolation,
        snapshot: Option<&RgbImage>,
    ) -> Result<ViolationRecord, StoreError> {
        let mut w = self.lock();
        let id = w.state.next_id();
        let snapshot_ref = match snapshot {
            Some(img) => self.snapshot_or_retry(&mut w, &new.stream_id, id, img),
            None => PENDING_RETRY.to_string(),
        };
        let record = ViolationRecord {
            violation_id: id,
            stream_id: new.stream_id,
            phone_track_id: new.phone_track_id,
            windscreen_track_id: new.windscreen_track_id,
            first_seen: new.first_seen,
            last_seen: new.last_seen.max(new.first_seen),
            frame_index_first: new.frame_index_first,
            snapshot_ref,
            max_score: new.max_score,
            review_status: ReviewStatus::Pending,
            reviewer_note: None,
            revision: 1,
        };
        self.write_record(&mut w, record.clone())?;
        self.publish(&w);
        Ok(record)
    }

    /// Extends `last_seen`, raises `max_score`, and replaces the snapshot
    /// when one is given (or retries a pending one).
    pub fn observe_violation(
        &self,
        id: u64,
        seen: Timestamp,
        score: f64,
        snapshot: Option<&RgbImage>,
    ) -> Result<ViolationRecord, StoreError> {
        let mut w = self.lock();
        let mut r = w.state.get(id).ok_or(StoreError::NotFound(id))?.clone();
        let mut changed = false;
        if seen > r.last_seen {
            r.last_seen = seen;
            changed = true;
        }
        if score > r.max_score {
            r.max_score = score;
            changed = true;
        }
        if let Some(img) = snapshot {
            r.snapshot_ref = self.snapshot_or_retry(&mut w, &r.stream_id, id, img);
            changed = true;
        }
        if changed {
            r.revision += 1;
            self.write_record(&mut w, r.clone())?;
            self.publish(&w);
        }
        Ok(r)
    }

    /// Returns `false` if the track was already counted.
    pub fn record_vehicle(
        &self,
        stream_id: &str,
        track_id: u64,
        basis: ClassLabel,
        first_seen: Timestamp,
    ) -> Result<bool, StoreError> {
        let mut w = self.lock();
        if w.state
            .vehicles
            .contains_key(&(stream_id.to_string(), track_id))
        {
            return Ok(false);
        }
        self.write_event(
            &mut w,
            Event::Vehicle {
                stream_id: stream_id.to_string(),
                track_id,
                basis,
                first_seen,
            },
        )?;
        self.publish(&w);
        Ok(true)
    }

    pub fn record_dropped(
        &self,
        stream_id: &str,
        windscreen_track_id: u64,
        phone_track_id: u64,
        at: Timestamp,
    ) -> Result<(), StoreError> {
        let mut w = self.lock();
        self.write_event(
            &mut w,
            Event::Dropped {
                stream_id: stream_id.to_string(),
                windscreen_track_id,
                phone_track_id,
                at,
            },
        )?;
        self.publish(&w);
        Ok(())
    }

    /// Moves a pending record to `decision`. Anything but a pending record
    /// is a conflict.
    pub fn review(
        &self,
        id: u64,
        decision: Decision,
        note: Option<String>,
    ) -> Result<ViolationRecord, StoreError> {
        let mut w = self.lock();
        let mut r = w.state.get(id).ok_or(StoreError::NotFound(id))?.clone();
        if r.review_status != ReviewStatus::Pending {
            return Err(StoreError::Conflict {
                id,
                status: r.review_status,
            });
        }
        r.review_status = decision.into();
        r.reviewer_note = note.clone();
        r.revision += 1;
        self.write_record(&mut w, r.clone())?;
        self.write_event(
            &mut w,
            Event::Review {
                violation_id: id,
                decision,
                note,
                at: Timestamp::now(),
                revision: r.revision,
            },
        )?;
        self.publish(&w);
        Ok(r)
    }

    /// Retries pending snapshot writes and syncs both logs to disk.
    pub fn flush(&self) -> Result<(), StoreError> {
        let mut w = self.lock();
        let pending: Vec<(u64, RgbImage)> = w.retry.drain().collect();
        let mut changed = false;
        for (id, img) in pending {
            let Some(rec) = w.state.get(id).cloned() else {
                continue;
            };
            if !rec.snapshot_pending() {
                continue;
            }
            let rel = self.snapshot_or_retry(&mut w, &rec.stream_id, id, &img);
            if rel != PENDING_RETRY {
                let mut r = rec;
                r.snapshot_ref = rel;
                r.revision += 1;
                self.write_record(&mut w, r)?;
                changed = true;
            }
        }
        if changed {
            self.publish(&w);
        }
        let vpath = self.inner.dir.join(VIOLATIONS_LOG);
        let epath = self.inner.dir.join(EVENTS_LOG);
        w.violations.sync_all().map_err(io_err(&vpath))?;
        w.events.sync_all().map_err(io_err(&epath))?;
        Ok(())
    }

    /// Number of records still waiting for a snapshot write.
    pub fn pending_snapshots(&self) -> usize {
        self.lock().retry.len()
    }
}
