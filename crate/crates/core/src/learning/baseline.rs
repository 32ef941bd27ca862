use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::event::{Millis, SensorEvent};
use crate::ontology::ConceptId;

use super::{read_snapshot, write_snapshot, ContextKey, LearningError};

/// Twenty minutes.
pub const DEFAULT_WINDOW_LENGTH: Millis = 20 * 60_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyCounts {
    pub event_count: u64,
    pub window_count: u64,
}

impl KeyCounts {
    /// Mean events per window.
    pub fn rate(&self) -> f64 {
        if self.window_count == 0 {
            0.0
        } else {
            self.event_count as f64 / self.window_count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct KeyState {
    event_count: u64,
    /// Camera-hour window ordinal at which the key was first seen.
    first_window: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CameraHour {
    /// Windows of this hour bucket in which the camera reported anything.
    windows: u64,
    last_window: i64,
}

/// Per-(camera, hour, concept) event rates.
///
/// A key's window count is the number of windows in its camera/hour slot
/// since the key was first observed, so windows where the camera reported
/// other concepts count as zero-event windows for the key.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    window_length: Millis,
    keys: BTreeMap<ContextKey, KeyState>,
    camera_hours: BTreeMap<(String, u8), CameraHour>,
}

impl Default for Baseline {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW_LENGTH)
    }
}

impl Baseline {
    pub fn new(window_length: Millis) -> Self {
        assert!(window_length > 0, "window length must be positive");
        Self { window_length, keys: BTreeMap::new(), camera_hours: BTreeMap::new() }
    }

    pub fn window_length(&self) -> Millis {
        self.window_length
    }

    pub fn window_index(&self, ts: Millis) -> i64 {
        ts.div_euclid(self.window_length)
    }

    pub fn update(&mut self, e: &SensorEvent) {
        let key = ContextKey::of_event(e);
        let window = self.window_index(e.timestamp);
        let slot = self
            .camera_hours
            .entry((key.camera_id.clone(), key.hour_bucket))
            .or_insert(CameraHour { windows: 0, last_window: i64::MIN });
        if window > slot.last_window {
            slot.windows += 1;
            slot.last_window = window;
        }
        let ordinal = slot.windows;
        self.keys
            .entry(key)
            .or_insert(KeyState { event_count: 0, first_window: ordinal })
            .event_count += 1;
    }

    pub fn counts(&self, key: &ContextKey) -> Option<KeyCounts> {
        let state = self.keys.get(key)?;
        let slot = &self.camera_hours[&(key.camera_id.clone(), key.hour_bucket)];
        Some(KeyCounts {
            event_count: state.event_count,
            window_count: slot.windows - state.first_window + 1,
        })
    }

    /// Historical events per window; 0 for an unseen key.
    pub fn rate(&self, key: &ContextKey) -> f64 {
        self.counts(key).map_or(0.0, |c| c.rate())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn snapshot(&self) -> String {
        let keys = self.keys.keys().map(|k| {
            let c = self.counts(k).expect("key present");
            SnapRecord::Key {
                camera_id: k.camera_id.clone(),
                hour_bucket: k.hour_bucket,
                concept: k.concept.clone(),
                event_count: c.event_count,
                window_count: c.window_count,
            }
        });
        let slots = self.camera_hours.iter().map(|((cam, hour), s)| SnapRecord::CameraHour {
            camera_id: cam.clone(),
            hour_bucket: *hour,
            windows: s.windows,
            last_window: s.last_window,
        });
        write_snapshot(
            "baseline",
            BaselineParams { window_length: self.window_length },
            slots.chain(keys).collect::<Vec<_>>(),
        )
    }

    pub fn from_snapshot(text: &str) -> Result<Self, LearningError> {
        let (params, records): (BaselineParams, Vec<SnapRecord>) = read_snapshot("baseline", text)?;
        if params.window_length <= 0 {
            return Err(LearningError::Snapshot { line: 1, message: "window_length must be positive".into() });
        }
        let mut b = Baseline::new(params.window_length);
        let bad = |message: String| LearningError::Snapshot { line: 0, message };
        for r in records {
            match r {
                SnapRecord::CameraHour { camera_id, hour_bucket, windows, last_window } => {
                    if hour_bucket > 23 {
                        return Err(LearningError::InvalidHour(hour_bucket));
                    }
                    b.camera_hours.insert((camera_id, hour_bucket), CameraHour { windows, last_window });
                }
                SnapRecord::Key { camera_id, hour_bucket, concept, event_count, window_count } => {
                    let slot = b
                        .camera_hours
                        .get(&(camera_id.clone(), hour_bucket))
                        .ok_or_else(|| bad(format!("key for {camera_id}@{hour_bucket} without slot")))?;
                    if window_count == 0 || window_count > slot.windows {
                        return Err(bad(format!("window_count {window_count} inconsistent")));
                    }
                    let first_window = slot.windows + 1 - window_count;
                    b.keys.insert(
                        ContextKey::new(camera_id, hour_bucket, concept),
                        KeyState { event_count, first_window },
                    );
                }
            }
        }
        Ok(b)
    }
}

#[derive(Serialize, Deserialize)]
struct BaselineParams {
    window_length: Millis,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum SnapRecord {
    CameraHour { camera_id: String, hour_bucket: u8, windows: u64, last_window: i64 },
    Key { camera_id: String, hour_bucket: u8, concept: ConceptId, event_count: u64, window_count: u64 },
}

/// Events per concept within one window of one camera.
pub type WindowCounts = BTreeMap<ConceptId, u64>;

pub fn window_counts(events: &[SensorEvent]) -> WindowCounts {
    let mut counts = WindowCounts::new();
    for e in events {
        *counts.entry(e.concept.clone()).or_default() += 1;
    }
    counts
}

/// Largest standardized excess of any concept in the window over its
/// historical rate: `max(0, (n - rate) / sqrt(rate + 1))`.
pub fn anomaly_score(baseline: &Baseline, camera_id: &str, hour_bucket: u8, window: &WindowCounts) -> f64 {
    window
        .iter()
        .map(|(concept, &n)| {
            let rate = baseline.rate(&ContextKey::new(camera_id, hour_bucket, concept.clone()));
            (n as f64 - rate) / (rate + 1.0).sqrt()
        })
        .fold(0.0, f64::max)
}
