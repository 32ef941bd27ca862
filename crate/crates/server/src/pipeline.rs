//! The single serialized stage through which every state change flows.
//!
//! Processing is a pure function of the inbound message sequence: all time
//! decisions (window closing, board cadence, retention) use event time, the
//! largest timestamp seen so far, never the wall clock.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use fusion_core::event::{hour_bucket, Millis, SensorEvent};
use fusion_core::learning::{Baseline, ContextKey, LearningError, SeverityModel, WindowCounts};
use fusion_core::ontology::Ontology;
use fusion_core::pattern::{parse_pattern, Matcher, PatternError, StreamMatcher};
use fusion_core::retex::{
    compute_components, explain, CameraInputs, CameraSnapshot, DecayConstants, RetexEngine, RetexError,
};
use fusion_core::store::{EventStore, RetentionPolicy, StoreError, StoreOptions, SyncPolicy};
use tracing::{debug, info, warn};

use crate::config::{parse_pattern_file, Config};
use crate::protocol::{AddPattern, Alert, BoardCamera, BoardUpdate, Payload};

pub const BASELINE_SNAPSHOT: &str = "baseline.snap";
pub const SEVERITY_SNAPSHOT: &str = "severity.snap";
pub const RETEX_SNAPSHOT: &str = "retex.snap";
pub const BOARD_FILE: &str = "board.json";
pub const EVENTS_DIR: &str = "events";

#[derive(Debug, Clone)]
pub struct Settings {
    pub window_length: Millis,
    pub board_cadence: Millis,
    pub alert_board_gap: Millis,
    pub operators: u32,
    pub eta: f64,
    pub alpha: f64,
    pub decay: DecayConstants,
    pub retention: RetentionPolicy,
    pub sweep_interval: Millis,
    pub fsync: bool,
}

impl From<&Config> for Settings {
    fn from(c: &Config) -> Self {
        Self {
            window_length: c.window_length_ms,
            board_cadence: c.board_cadence_ms,
            alert_board_gap: c.alert_board_gap_ms,
            operators: c.operators,
            eta: c.eta,
            alpha: c.alpha,
            decay: DecayConstants { pattern: c.pattern_decay_ms, recency: c.recency_decay_ms },
            retention: c.retention(),
            sweep_interval: c.retention_sweep_interval_ms,
            fsync: c.fsync,
        }
    }
}

impl Default for Settings {
    fn default() -> Self {
        Settings::from(&Config::default())
    }
}

/// Rejection of one inbound message; the connection stays open.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub code: &'static str,
    pub detail: String,
}

impl Rejection {
    fn new(code: &'static str, detail: impl ToString) -> Self {
        Self { code, detail: detail.to_string() }
    }
}

impl From<StoreError> for Rejection {
    fn from(e: StoreError) -> Self {
        let code = match &e {
            StoreError::InvalidEvent(_) => "invalid_event",
            StoreError::UnknownConcept(_) => "unknown_concept",
            StoreError::DuplicateEventId(_) => "duplicate_id",
            StoreError::InvalidRange { .. } => "invalid_range",
            _ => "storage",
        };
        Rejection::new(code, e)
    }
}

impl From<RetexError> for Rejection {
    fn from(e: RetexError) -> Self {
        let code = match &e {
            RetexError::UnknownRecommendation(_) => "unknown_recommendation",
            RetexError::CameraNotOnBoard { .. } => "camera_not_on_board",
            _ => "retex",
        };
        Rejection::new(code, e)
    }
}

impl From<PatternError> for Rejection {
    fn from(e: PatternError) -> Self {
        let code = match &e {
            PatternError::UnknownConcept { .. } => "unknown_concept",
            _ => "pattern_syntax",
        };
        Rejection::new(code, e)
    }
}

impl From<LearningError> for Rejection {
    fn from(e: LearningError) -> Self {
        Rejection::new("invalid_rating", e)
    }
}

/// Result of handling one message: the reply to its sender and anything to
/// push to subscribed consoles.
#[derive(Debug, Default)]
pub struct Handled {
    pub reply: Option<Rejection>,
    pub pushes: Vec<Payload>,
}

#[derive(Debug, Default)]
struct CameraState {
    window: i64,
    /// Events of `window`; folded into the baseline once the window closes.
    events: Vec<SensorEvent>,
    counts: WindowCounts,
    last_event: Option<Millis>,
    last_alert: Option<Millis>,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Stats {
    pub events: u64,
    pub duplicates: u64,
    pub late: u64,
    pub alerts: u64,
    pub boards: u64,
    pub rejected: u64,
}

pub struct Pipeline {
    ontology: Arc<Ontology>,
    data_dir: PathBuf,
    settings: Settings,
    store: EventStore,
    baseline: Baseline,
    severity: SeverityModel,
    retex: RetexEngine,
    patterns: BTreeMap<String, StreamMatcher>,
    cameras: BTreeMap<String, CameraState>,
    clock: Option<Millis>,
    next_board: Option<Millis>,
    /// Event time of the last issued board.
    last_board: Option<Millis>,
    /// An alert arrived that no board reflects yet.
    alert_pending: bool,
    next_sweep: Option<Millis>,
    latest_board: Option<BoardUpdate>,
    stats: Stats,
}

impl Pipeline {
    /// Opens the store under `data_dir` and restores model snapshots found
    /// there.
    pub fn open(data_dir: &Path, ontology: Arc<Ontology>, settings: Settings) -> Result<Self> {
        fs::create_dir_all(data_dir).with_context(|| format!("creating {}", data_dir.display()))?;
        let opts = StoreOptions {
            sync: if settings.fsync { SyncPolicy::Fsync } else { SyncPolicy::OsBuffer },
            ..StoreOptions::default()
        };
        let store = EventStore::open_with(data_dir.join(EVENTS_DIR), ontology.clone(), opts)?;
        let baseline = match read_optional(&data_dir.join(BASELINE_SNAPSHOT))? {
            Some(text) => Baseline::from_snapshot(&text)?,
            None => Baseline::new(settings.window_length),
        };
        let severity = match read_optional(&data_dir.join(SEVERITY_SNAPSHOT))? {
            Some(text) => SeverityModel::from_snapshot(&text)?,
            None => SeverityModel::new(settings.alpha),
        };
        let mut retex = RetexEngine::new(settings.eta, settings.operators)?;
        if let Some(text) = read_optional(&data_dir.join(RETEX_SNAPSHOT))? {
            retex.restore(&text)?;
        }
        info!(dir = %data_dir.display(), records = store.len(), "pipeline ready");
        Ok(Self {
            ontology,
            data_dir: data_dir.to_path_buf(),
            settings,
            store,
            baseline,
            severity,
            retex,
            patterns: BTreeMap::new(),
            cameras: BTreeMap::new(),
            clock: None,
            next_board: None,
            last_board: None,
            alert_pending: false,
            next_sweep: None,
            latest_board: None,
            stats: Stats::default(),
        })
    }

    /// Builds a pipeline from a config: ontology, store, snapshots and the
    /// pattern file.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let ontology = match &cfg.ontology_path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading ontology {}", p.display()))?;
                Ontology::load(&text).with_context(|| format!("loading ontology {}", p.display()))?
            }
            None => Ontology::seed(),
        };
        let mut pipeline = Pipeline::open(&cfg.data_dir, Arc::new(ontology), Settings::from(cfg))?;
        if let Some(p) = &cfg.pattern_file {
            let text = fs::read_to_string(p).with_context(|| format!("reading patterns {}", p.display()))?;
            for (name, pattern_text) in parse_pattern_file(&text)? {
                pipeline
                    .add_pattern(&AddPattern { name: name.clone(), pattern_text })
                    .map_err(|r| anyhow::anyhow!("pattern `{name}`: {}", r.detail))?;
            }
        }
        Ok(pipeline)
    }

    pub fn ontology(&self) -> &Arc<Ontology> {
        &self.ontology
    }

    pub fn store(&self) -> &EventStore {
        &self.store
    }

    pub fn baseline(&self) -> &Baseline {
        &self.baseline
    }

    pub fn severity(&self) -> &SeverityModel {
        &self.severity
    }

    pub fn retex(&self) -> &RetexEngine {
        &self.retex
    }

    pub fn latest_board(&self) -> Option<&BoardUpdate> {
        self.latest_board.as_ref()
    }

    pub fn stats(&self) -> Stats {
        self.stats
    }

    pub fn clock(&self) -> Option<Millis> {
        self.clock
    }

    pub fn pattern_names(&self) -> impl Iterator<Item = &str> {
        self.patterns.keys().map(String::as_str)
    }

    pub fn handle(&mut self, payload: Payload) -> Handled {
        let mut out = Handled::default();
        let result = match payload {
            Payload::SensorEvent(e) => self.on_event(e, &mut out.pushes),
            Payload::Annotation(a) => match self.store.append_annotation(a.clone()) {
                Ok(_) => {
                    let key = ContextKey::new(a.camera_id.clone(), hour_bucket(a.timestamp), a.concept.clone());
                    self.severity.update(&key, a.severity).map_err(Rejection::from)
                }
                Err(StoreError::DuplicateEventId(_)) => Ok(()),
                Err(e) => Err(e.into()),
            },
            Payload::Rating(r) => self.severity.update(&r.key(), r.rating).map_err(Rejection::from),
            Payload::Feedback(fb) => self.retex.feedback(&fb).map(drop).map_err(Rejection::from),
            Payload::AddPattern(p) => self.add_pattern(&p),
            Payload::Subscribe(_) => Ok(()),
            other => Err(Rejection::new("not_inbound", format!("`{}` is sent by the server only", other.kind()))),
        };
        if let Err(r) = result {
            self.stats.rejected += 1;
            out.reply = Some(r);
        }
        out
    }

    pub fn add_pattern(&mut self, p: &AddPattern) -> Result<(), Rejection> {
        if p.name.trim().is_empty() {
            return Err(Rejection::new("invalid_pattern_name", "pattern name must be non-empty"));
        }
        if self.patterns.contains_key(&p.name) {
            return Err(Rejection::new("duplicate_pattern", format!("pattern `{}` already exists", p.name)));
        }
        let ast = parse_pattern(&p.pattern_text, &self.ontology)?;
        let matcher = Matcher::new(&ast, &self.ontology)?;
        info!(name = %p.name, pattern = %matcher.pattern_text(), "pattern added");
        self.patterns.insert(p.name.clone(), matcher.stream());
        Ok(())
    }

    fn on_event(&mut self, e: SensorEvent, pushes: &mut Vec<Payload>) -> Result<(), Rejection> {
        match self.store.append_event(e.clone()) {
            Ok(_) => {}
            Err(StoreError::DuplicateEventId(id)) => {
                debug!(%id, "duplicate event acknowledged");
                self.stats.duplicates += 1;
                return Ok(());
            }
            Err(err) => return Err(err.into()),
        }
        self.stats.events += 1;
        let in_order = self.clock.is_none_or(|c| e.timestamp >= c);
        if !in_order {
            self.stats.late += 1;
        }

        let window = self.baseline.window_index(e.timestamp);
        let cam = self.cameras.entry(e.camera_id.clone()).or_insert_with(|| CameraState {
            window,
            ..CameraState::default()
        });
        if window > cam.window {
            for old in cam.events.drain(..) {
                self.baseline.update(&old);
            }
            cam.counts.clear();
            cam.window = window;
        }
        if window == cam.window {
            *cam.counts.entry(e.concept.clone()).or_default() += 1;
            cam.events.push(e.clone());
        } else {
            // Late event for a window already folded into the baseline.
            self.baseline.update(&e);
        }
        cam.last_event = Some(cam.last_event.map_or(e.timestamp, |t| t.max(e.timestamp)));

        let mut alerted = false;
        if in_order {
            for (name, stream) in &mut self.patterns {
                if let Ok(Some(m)) = stream.push(&e) {
                    let target = self.cameras.get_mut(&m.camera_id).expect("closing camera is known");
                    target.last_alert = Some(target.last_alert.map_or(m.end, |t| t.max(m.end)));
                    self.stats.alerts += 1;
                    alerted = true;
                    pushes.push(Payload::Alert(Alert {
                        pattern: name.clone(),
                        event_ids: m.event_ids,
                        camera_id: m.camera_id,
                        start: m.start,
                        end: m.end,
                    }));
                }
            }
        } else {
            debug!(id = %e.event_id, "late event skipped by matchers");
        }

        let now = self.clock.map_or(e.timestamp, |c| c.max(e.timestamp));
        self.clock = Some(now);
        let cadence = self.settings.board_cadence;
        let due = match self.next_board {
            Some(t) => now >= t,
            None => {
                self.next_board = Some(align_next(now, cadence));
                false
            }
        };
        self.alert_pending |= alerted;
        let gap_over = self.last_board.is_none_or(|t| now - t >= self.settings.alert_board_gap);
        if due || (self.alert_pending && gap_over) {
            pushes.push(Payload::BoardUpdate(self.issue_board(now)?));
        }
        self.maybe_sweep(now);
        Ok(())
    }

    fn maybe_sweep(&mut self, now: Millis) {
        let interval = self.settings.sweep_interval;
        if interval <= 0 {
            return;
        }
        match self.next_sweep {
            Some(t) if now >= t => {
                match self.store.retention_sweep(now, self.settings.retention) {
                    Ok(r) if r.events_stripped + r.records_deleted > 0 => {
                        info!(stripped = r.events_stripped, deleted = r.records_deleted, "retention sweep")
                    }
                    Ok(_) => {}
                    Err(e) => warn!(error = %e, "retention sweep failed"),
                }
                self.next_sweep = Some(align_next(now, interval));
            }
            Some(_) => {}
            None => self.next_sweep = Some(align_next(now, interval)),
        }
    }

    /// Risk components of every known camera at event time `now`.
    pub fn camera_snapshot(&self, now: Millis) -> Vec<CameraSnapshot> {
        let window = self.baseline.window_index(now);
        let empty = WindowCounts::new();
        self.cameras
            .iter()
            .map(|(id, cam)| {
                let inputs = CameraInputs {
                    camera_id: id,
                    window: if cam.window == window { &cam.counts } else { &empty },
                    last_alert: cam.last_alert,
                    last_event: cam.last_event,
                };
                CameraSnapshot {
                    camera_id: id.clone(),
                    components: compute_components(&inputs, now, &self.baseline, &self.severity, self.settings.decay),
                }
            })
            .collect()
    }

    /// Issues a recommendation at `now` and records it as the latest board.
    pub fn issue_board(&mut self, now: Millis) -> Result<BoardUpdate, Rejection> {
        let snapshot = self.camera_snapshot(now);
        let rec = self.retex.issue(&snapshot, now)?;
        let cameras = rec
            .cameras
            .iter()
            .map(|c| BoardCamera {
                camera_id: c.camera_id.clone(),
                risk: c.risk,
                components: c.components,
                rank: c.rank,
                explain_text: explain(&rec, &c.camera_id).map(|x| x.text()).unwrap_or_default(),
            })
            .collect();
        let board = BoardUpdate {
            recommendation_id: rec.recommendation_id,
            issued_at: rec.issued_at,
            budget: rec.budget,
            cameras,
        };
        self.stats.boards += 1;
        self.latest_board = Some(board.clone());
        self.last_board = Some(now);
        self.alert_pending = false;
        self.next_board = Some(align_next(now, self.settings.board_cadence));
        Ok(board)
    }

    /// Issues the board held back by the alert gap, if any, at the current
    /// event clock.
    pub fn flush_alert_board(&mut self) -> Option<BoardUpdate> {
        let now = self.clock?;
        if !self.alert_pending {
            return None;
        }
        self.issue_board(now).ok()
    }

    /// Writes model snapshots atomically into the data directory.
    pub fn write_snapshots(&self) -> io::Result<()> {
        write_atomic(&self.data_dir.join(BASELINE_SNAPSHOT), &self.baseline.snapshot())?;
        write_atomic(&self.data_dir.join(SEVERITY_SNAPSHOT), &self.severity.snapshot())?;
        write_atomic(&self.data_dir.join(RETEX_SNAPSHOT), &self.retex.snapshot())?;
        if let Some(b) = &self.latest_board {
            let text = serde_json::to_string(b).expect("board serializes") + "\n";
            write_atomic(&self.data_dir.join(BOARD_FILE), &text)?;
        }
        Ok(())
    }

    /// Folds open windows into the baseline, syncs the log and writes
    /// snapshots. Called once on shutdown.
    pub fn finish(&mut self) -> Result<()> {
        for cam in self.cameras.values_mut() {
            for e in cam.events.drain(..) {
                self.baseline.update(&e);
            }
            cam.counts.clear();
        }
        self.store.sync()?;
        self.write_snapshots()?;
        info!(?self.stats, "pipeline flushed");
        Ok(())
    }
}

fn align_next(t: Millis, step: Millis) -> Millis {
    (t.div_euclid(step) + 1) * step
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(t) => Ok(Some(t)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

fn write_atomic(path: &Path, text: &str) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::File::open(&tmp)?.sync_all()?;
    fs::rename(tmp, path)
}
