//! Long-term normality memory and the rating-supervised severity model.

mod baseline;
mod severity;

use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{hour_bucket, SensorEvent};
use crate::ontology::ConceptId;

pub use baseline::{anomaly_score, window_counts, Baseline, KeyCounts, WindowCounts, DEFAULT_WINDOW_LENGTH};
pub use severity::{BackoffLevel, SeverityModel, SeverityPrediction, SEVERITY_LEVELS};

/// Granularity at which normality and severity are remembered.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextKey {
    pub camera_id: String,
    pub hour_bucket: u8,
    pub concept: ConceptId,
}

impl ContextKey {
    pub fn new(camera_id: impl Into<String>, hour_bucket: u8, concept: ConceptId) -> Self {
        debug_assert!(hour_bucket < 24);
        Self { camera_id: camera_id.into(), hour_bucket, concept }
    }

    pub fn of_event(e: &SensorEvent) -> Self {
        Self::new(e.camera_id.clone(), hour_bucket(e.timestamp), e.concept.clone())
    }
}

impl fmt::Display for ContextKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{:02}h/{}", self.camera_id, self.hour_bucket, self.concept)
    }
}

#[derive(Debug, Error)]
pub enum LearningError {
    #[error("rating {0} outside 0..=4")]
    InvalidRating(u8),
    #[error("hour bucket {0} outside 0..=23")]
    InvalidHour(u8),
    #[error("snapshot line {line}: {message}")]
    Snapshot { line: usize, message: String },
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader<H> {
    format: String,
    version: u32,
    #[serde(flatten)]
    params: H,
}

const SNAPSHOT_VERSION: u32 = 1;

/// Header line plus one JSON record per line.
fn write_snapshot<H: Serialize, R: Serialize>(
    format: &str,
    params: H,
    records: impl IntoIterator<Item = R>,
) -> String {
    let header = SnapshotHeader { format: format.to_owned(), version: SNAPSHOT_VERSION, params };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(&r).expect("record serializes"));
        out.push('\n');
    }
    out
}

fn read_snapshot<H: DeserializeOwned, R: DeserializeOwned>(
    format: &str,
    text: &str,
) -> Result<(H, Vec<R>), LearningError> {
    let err = |line: usize, message: String| LearningError::Snapshot { line, message };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let header: SnapshotHeader<H> =
        serde_json::from_str(first).map_err(|e| err(1, e.to_string()))?;
    if header.format != format {
        return Err(err(1, format!("expected format `{format}`, found `{}`", header.format)));
    }
    if header.version != SNAPSHOT_VERSION {
        return Err(err(1, format!("unsupported version {}", header.version)));
    }
    let records = lines
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| err(i + 1, e.to_string())))
        .collect::<Result<_, _>>()?;
    Ok((header.params, records))
}
