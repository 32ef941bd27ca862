//! Append-only event log.
//!
//! Records are newline-delimited JSON objects spread over segment files
//! named `events-<first_seq>.log`. A `manifest` file lists the segments in
//! order, one file name per line. The whole log is indexed in memory on open.
//!
//! ```text
//! {dir}/
//! ├── manifest
//! ├── events-1.log
//! └── events-50001.log   <- active segment, appended to
//! ```
//!
//! A record is complete once its terminating newline is on disk. On open a
//! trailing partial record is dropped and the segment is truncated back to
//! the last complete record; any other unparsable line is reported as
//! corruption.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::ops::Bound;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::event::{InvalidField, Millis, OperatorAnnotation, SensorEvent};
use crate::ontology::{ConceptId, Ontology, OntologyError};

const MANIFEST: &str = "manifest";
const DAY_MS: i64 = 24 * 3_600_000;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate event id `{0}`")]
    DuplicateEventId(String),
    #[error(transparent)]
    InvalidEvent(#[from] InvalidField),
    #[error(transparent)]
    UnknownConcept(OntologyError),
    #[error("invalid time range [{from}, {to})")]
    InvalidRange { from: Millis, to: Millis },
    #[error("corrupt log {segment} line {line}: {message}")]
    Corrupt { segment: String, line: usize, message: String },
    #[error("invalid retention policy: {0}")]
    InvalidPolicy(String),
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
}

/// Two-threshold retention: video links expire first, metadata much later.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPolicy {
    pub video_retention: Millis,
    pub metadata_retention: Millis,
}

impl RetentionPolicy {
    pub fn new(video_retention: Millis, metadata_retention: Millis) -> Result<Self, StoreError> {
        if video_retention <= 0 {
            return Err(StoreError::InvalidPolicy("video_retention must be positive".into()));
        }
        if metadata_retention < video_retention {
            return Err(StoreError::InvalidPolicy(
                "metadata_retention must be at least video_retention".into(),
            ));
        }
        Ok(Self { video_retention, metadata_retention })
    }
}

impl Default for RetentionPolicy {
    /// 30 days of video links, 365 days of metadata.
    fn default() -> Self {
        Self { video_retention: 30 * DAY_MS, metadata_retention: 365 * DAY_MS }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepReport {
    pub events_stripped: usize,
    pub records_deleted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncPolicy {
    /// Each record is handed to the OS in a single write.
    OsBuffer,
    /// Additionally `fdatasync` after every record.
    Fsync,
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    pub max_segment_records: usize,
    pub sync: SyncPolicy,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self { max_segment_records: 50_000, sync: SyncPolicy::OsBuffer }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    SensorEvent(SensorEvent),
    Annotation(OperatorAnnotation),
}

impl Record {
    fn timestamp(&self) -> Millis {
        match self {
            Record::SensorEvent(e) => e.timestamp,
            Record::Annotation(a) => a.timestamp,
        }
    }

    fn id(&self) -> &str {
        match self {
            Record::SensorEvent(e) => &e.event_id,
            Record::Annotation(a) => &a.annotation_id,
        }
    }

    /// The record as seen by event queries.
    pub fn as_event(&self) -> SensorEvent {
        match self {
            Record::SensorEvent(e) => e.clone(),
            Record::Annotation(a) => a.to_event(),
        }
    }
}

/// One line of a segment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub seq: u64,
    #[serde(flatten)]
    pub record: Record,
}

#[derive(Debug, Clone)]
struct Segment {
    first_seq: u64,
    name: String,
}

fn segment_name(first_seq: u64) -> String {
    format!("events-{first_seq}.log")
}

/// Reads the complete records of one segment.
///
/// Returns the parsed lines and the byte length of the complete prefix; a
/// trailing fragment without newline is not part of that prefix.
pub fn read_segment(path: &Path) -> Result<(Vec<LogLine>, u64, bool), StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), 0, false)),
        Err(e) => return Err(e.into()),
    };
    let complete_len = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let torn = complete_len < bytes.len();
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut out = Vec::new();
    for (i, raw) in bytes[..complete_len].split(|&b| b == b'\n').enumerate() {
        if raw.is_empty() {
            continue;
        }
        let corrupt = |message: String| StoreError::Corrupt {
            segment: name.clone(),
            line: i + 1,
            message,
        };
        let text = std::str::from_utf8(raw).map_err(|e| corrupt(e.to_string()))?;
        out.push(serde_json::from_str::<LogLine>(text).map_err(|e| corrupt(e.to_string()))?);
    }
    Ok((out, complete_len as u64, torn))
}

/// Append-only store of sensor events and operator annotations.
///
/// Single writer: every mutation takes `&mut self`. Queries borrow `&self`
/// and therefore never observe a half-applied append.
pub struct EventStore {
    dir: PathBuf,
    ontology: Arc<Ontology>,
    opts: StoreOptions,
    segments: Vec<Segment>,
    active: File,
    active_records: usize,
    next_seq: u64,
    records: BTreeMap<u64, Record>,
    by_time: BTreeMap<(Millis, String), u64>,
    ids: HashMap<String, u64>,
}

impl EventStore {
    pub fn open(dir: impl AsRef<Path>, ontology: Arc<Ontology>) -> Result<Self, StoreError> {
        Self::open_with(dir, ontology, StoreOptions::default())
    }

    pub fn open_with(
        dir: impl AsRef<Path>,
        ontology: Arc<Ontology>,
        opts: StoreOptions,
    ) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut segments = read_manifest(&dir)?;

        let mut records = BTreeMap::new();
        let mut by_time = BTreeMap::new();
        let mut ids = HashMap::new();
        let mut next_seq = 1;
        let mut active_records = 0;
        for (i, seg) in segments.iter().enumerate() {
            let path = dir.join(&seg.name);
            let (lines, complete_len, torn) = read_segment(&path)?;
            if torn {
                warn!(segment = %seg.name, "dropping trailing partial record");
                OpenOptions::new().write(true).open(&path)?.set_len(complete_len)?;
            }
            if i + 1 == segments.len() {
                active_records = lines.len();
            }
            for line in lines {
                if line.seq < next_seq {
                    return Err(StoreError::Corrupt {
                        segment: seg.name.clone(),
                        line: 0,
                        message: format!("sequence {} not increasing", line.seq),
                    });
                }
                let id = line.record.id().to_owned();
                if ids.insert(id.clone(), line.seq).is_some() {
                    return Err(StoreError::Corrupt {
                        segment: seg.name.clone(),
                        line: 0,
                        message: format!("duplicate id `{id}`"),
                    });
                }
                by_time.insert((line.record.timestamp(), id), line.seq);
                next_seq = line.seq + 1;
                records.insert(line.seq, line.record);
            }
        }

        if segments.is_empty() {
            segments.push(Segment { first_seq: next_seq, name: segment_name(next_seq) });
            write_manifest(&dir, &segments)?;
        }
        let active = open_append(&dir.join(&segments.last().unwrap().name))?;
        Ok(Self {
            dir,
            ontology,
            opts,
            segments,
            active,
            active_records,
            next_seq,
            records,
            by_time,
            ids,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn ontology(&self) -> &Arc<Ontology> {
        &self.ontology
    }

    /// Number of stored records (events and annotations).
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.ids.contains_key(id)
    }

    pub fn segment_paths(&self) -> Vec<PathBuf> {
        self.segments.iter().map(|s| self.dir.join(&s.name)).collect()
    }

    /// Validates and appends a sensor event; returns its sequence number.
    pub fn append_event(&mut self, event: SensorEvent) -> Result<u64, StoreError> {
        event.validate()?;
        self.check_concept(&event.concept)?;
        self.append(Record::SensorEvent(event))
    }

    /// Appends an operator annotation. Queries see it as a human event.
    pub fn append_annotation(&mut self, annotation: OperatorAnnotation) -> Result<u64, StoreError> {
        annotation.validate()?;
        self.check_concept(&annotation.concept)?;
        self.append(Record::Annotation(annotation))
    }

    fn check_concept(&self, concept: &ConceptId) -> Result<(), StoreError> {
        self.ontology
            .validate_term(concept.as_str())
            .map(drop)
            .map_err(StoreError::UnknownConcept)
    }

    fn append(&mut self, record: Record) -> Result<u64, StoreError> {
        let id = record.id().to_owned();
        if self.ids.contains_key(&id) {
            return Err(StoreError::DuplicateEventId(id));
        }
        if self.active_records >= self.opts.max_segment_records {
            self.rotate()?;
        }
        let seq = self.next_seq;
        let line = LogLine { seq, record };
        let mut buf = serde_json::to_vec(&line).map_err(io::Error::other)?;
        buf.push(b'\n');
        self.active.write_all(&buf)?;
        if self.opts.sync == SyncPolicy::Fsync {
            self.active.sync_data()?;
        }
        self.next_seq += 1;
        self.active_records += 1;
        self.by_time.insert((line.record.timestamp(), id.clone()), seq);
        self.ids.insert(id, seq);
        self.records.insert(seq, line.record);
        Ok(seq)
    }

    fn rotate(&mut self) -> Result<(), StoreError> {
        self.active.sync_data()?;
        let seg = Segment { first_seq: self.next_seq, name: segment_name(self.next_seq) };
        self.segments.push(seg);
        write_manifest(&self.dir, &self.segments)?;
        self.active = open_append(&self.dir.join(&self.segments.last().unwrap().name))?;
        self.active_records = 0;
        Ok(())
    }

    /// Flushes the active segment to stable storage.
    pub fn sync(&self) -> Result<(), StoreError> {
        self.active.sync_data()?;
        Ok(())
    }

    /// Events with `from <= timestamp < to`, optionally restricted to one
    /// camera and to concepts subsumed by `concept`, ordered by
    /// `(timestamp, event_id)`.
    pub fn query(
        &self,
        from: Millis,
        to: Millis,
        camera: Option<&str>,
        concept: Option<&str>,
    ) -> Result<Vec<SensorEvent>, StoreError> {
        if from > to {
            return Err(StoreError::InvalidRange { from, to });
        }
        if let Some(c) = concept {
            self.ontology.validate_term(c).map_err(StoreError::UnknownConcept)?;
        }
        let range = (
            Bound::Included((from, String::new())),
            Bound::Excluded((to, String::new())),
        );
        Ok(self
            .by_time
            .range(range)
            .map(|(_, seq)| self.records[seq].as_event())
            .filter(|e| camera.is_none_or(|c| e.camera_id == c))
            .filter(|e| concept.is_none_or(|c| self.ontology.is_a(e.concept.as_str(), c)))
            .collect())
    }

    /// Operator annotations with `from <= timestamp < to`, in time order.
    pub fn annotations(&self, from: Millis, to: Millis) -> Result<Vec<OperatorAnnotation>, StoreError> {
        if from > to {
            return Err(StoreError::InvalidRange { from, to });
        }
        let range = (
            Bound::Included((from, String::new())),
            Bound::Excluded((to, String::new())),
        );
        Ok(self
            .by_time
            .range(range)
            .filter_map(|(_, seq)| match &self.records[seq] {
                Record::Annotation(a) => Some(a.clone()),
                Record::SensorEvent(_) => None,
            })
            .collect())
    }

    /// All records as events, in `(timestamp, event_id)` order.
    pub fn events(&self) -> impl Iterator<Item = SensorEvent> + '_ {
        self.by_time.values().map(|seq| self.records[seq].as_event())
    }

    /// Strips video links older than the video horizon and deletes records
    /// older than the metadata horizon. Affected segments are rewritten via
    /// temp file and rename; memory is only updated once the files are in
    /// place.
    pub fn retention_sweep(
        &mut self,
        now: Millis,
        policy: RetentionPolicy,
    ) -> Result<SweepReport, StoreError> {
        let video_cut = now.saturating_sub(policy.video_retention);
        let meta_cut = now.saturating_sub(policy.metadata_retention);

        let mut report = SweepReport::default();
        let mut deletions = Vec::new();
        let mut strips = Vec::new();
        for (&seq, record) in &self.records {
            let ts = record.timestamp();
            if ts < meta_cut {
                deletions.push(seq);
                report.records_deleted += 1;
            } else if ts < video_cut {
                if let Record::SensorEvent(e) = record {
                    if e.video_ref.is_some() {
                        strips.push(seq);
                        report.events_stripped += 1;
                    }
                }
            }
        }
        if deletions.is_empty() && strips.is_empty() {
            return Ok(report);
        }

        let mut next = self.records.clone();
        for seq in &deletions {
            next.remove(seq);
        }
        for seq in &strips {
            if let Some(Record::SensorEvent(e)) = next.get_mut(seq) {
                e.video_ref = None;
            }
        }

        let touched: Vec<usize> = (0..self.segments.len())
            .filter(|&i| {
                let (lo, hi) = self.segment_range(i);
                deletions.iter().chain(&strips).any(|s| (lo..hi).contains(s))
            })
            .collect();

        let mut staged = Vec::new();
        let result = (|| -> Result<(), StoreError> {
            for &i in &touched {
                let (lo, hi) = self.segment_range(i);
                let final_path = self.dir.join(&self.segments[i].name);
                let tmp_path = final_path.with_extension("log.tmp");
                let mut buf = Vec::new();
                for (&seq, record) in next.range(lo..hi) {
                    serde_json::to_writer(&mut buf, &LogLine { seq, record: record.clone() })
                        .map_err(io::Error::other)?;
                    buf.push(b'\n');
                }
                let mut f = File::create(&tmp_path)?;
                staged.push((tmp_path.clone(), final_path));
                f.write_all(&buf)?;
                f.sync_all()?;
            }
            Ok(())
        })();
        if let Err(e) = result {
            for (tmp, _) in &staged {
                let _ = fs::remove_file(tmp);
            }
            return Err(e);
        }
        for (tmp, dst) in &staged {
            fs::rename(tmp, dst)?;
        }
        sync_dir(&self.dir);

        let last = self.segments.len() - 1;
        let active_touched = touched.contains(&last);
        let emptied: Vec<usize> = touched
            .iter()
            .copied()
            .filter(|&i| i != last && {
                let (lo, hi) = self.segment_range(i);
                next.range(lo..hi).next().is_none()
            })
            .collect();

        // Commit the new state in memory.
        for seq in deletions {
            if let Some(record) = self.records.get(&seq) {
                let key = (record.timestamp(), record.id().to_owned());
                self.by_time.remove(&key);
                self.ids.remove(&key.1);
            }
        }
        let (active_lo, _) = self.segment_range(last);
        self.records = next;
        self.active_records = self.records.range(active_lo..).count();
        if active_touched {
            self.active = open_append(&self.dir.join(&self.segments[last].name))?;
        }
        if !emptied.is_empty() {
            let removed: Vec<String> =
                emptied.iter().map(|&i| self.segments[i].name.clone()).collect();
            self.segments.retain(|s| !removed.contains(&s.name));
            write_manifest(&self.dir, &self.segments)?;
            for name in removed {
                let _ = fs::remove_file(self.dir.join(name));
            }
        }
        Ok(report)
    }

    fn segment_range(&self, i: usize) -> (u64, u64) {
        let lo = self.segments[i].first_seq;
        let hi = self.segments.get(i + 1).map_or(u64::MAX, |s| s.first_seq);
        (lo, hi)
    }
}

fn open_append(path: &Path) -> io::Result<File> {
    OpenOptions::new().create(true).append(true).open(path)
}

fn read_manifest(dir: &Path) -> Result<Vec<Segment>, StoreError> {
    let text = match fs::read_to_string(dir.join(MANIFEST)) {
        Ok(text) => text,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut segments = Vec::new();
    for (i, name) in text.lines().map(str::trim).enumerate().filter(|(_, l)| !l.is_empty()) {
        let first_seq = name
            .strip_prefix("events-")
            .and_then(|s| s.strip_suffix(".log"))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| StoreError::Corrupt {
                segment: MANIFEST.into(),
                line: i + 1,
                message: format!("bad segment name `{name}`"),
            })?;
        segments.push(Segment { first_seq, name: name.to_owned() });
    }
    Ok(segments)
}

/// Complete records of a store directory in log order, without opening it
/// for writing. A torn tail is skipped, not repaired.
pub fn scan_dir(dir: &Path) -> Result<Vec<LogLine>, StoreError> {
    let mut out = Vec::new();
    for seg in read_manifest(dir)? {
        out.extend(read_segment(&dir.join(&seg.name))?.0);
    }
    Ok(out)
}

fn write_manifest(dir: &Path, segments: &[Segment]) -> io::Result<()> {
    let tmp = dir.join("manifest.tmp");
    let mut body = String::new();
    for s in segments {
        body.push_str(&s.name);
        body.push('\n');
    }
    let mut f = File::create(&tmp)?;
    f.write_all(body.as_bytes())?;
    f.sync_all()?;
    fs::rename(tmp, dir.join(MANIFEST))?;
    sync_dir(dir);
    Ok(())
}

fn sync_dir(dir: &Path) {
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}
