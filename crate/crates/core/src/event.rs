//! Canonical records shared by machine labelers, operators and the store.
//!
//! Both annotation sources end up as [`SensorEvent`]s: machine labels arrive
//! as-is, operator annotations are projected with `source = human` and full
//! confidence (see [`OperatorAnnotation::to_event`]).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::ConceptId;

/// Milliseconds since the Unix epoch, UTC.
pub type Millis = i64;

pub const MAX_FREE_TEXT_CHARS: usize = 2000;
pub const MAX_SEVERITY: u8 = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Machine,
    Human,
}

/// Bounding box as fractions of the frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Attribute value attached to an event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Flag(bool),
    Number(f64),
    Text(String),
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Flag(b) => write!(f, "{b}"),
            Scalar::Number(n) if n.fract() == 0.0 && n.abs() < 1e15 => write!(f, "{}", *n as i64),
            Scalar::Number(n) => write!(f, "{n}"),
            Scalar::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid {field}: {reason}")]
pub struct InvalidField {
    pub field: &'static str,
    pub reason: String,
}

impl InvalidField {
    fn new(field: &'static str, reason: impl Into<String>) -> Self {
        Self { field, reason: reason.into() }
    }
}

/// One observation bound to a camera, a time and an ontology concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorEvent {
    pub event_id: String,
    pub camera_id: String,
    pub timestamp: Millis,
    pub concept: ConceptId,
    pub confidence: f64,
    #[serde(default)]
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_ref: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, Scalar>,
}

impl SensorEvent {
    /// Minimal machine event; the remaining fields default to absent.
    pub fn new(
        event_id: impl Into<String>,
        camera_id: impl Into<String>,
        timestamp: Millis,
        concept: ConceptId,
        confidence: f64,
    ) -> Self {
        Self {
            event_id: event_id.into(),
            camera_id: camera_id.into(),
            timestamp,
            concept,
            confidence,
            source: Source::Machine,
            bbox: None,
            video_ref: None,
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_attribute(mut self, name: impl Into<String>, value: Scalar) -> Self {
        self.attributes.insert(name.into(), value);
        self
    }

    pub fn with_video_ref(mut self, video_ref: impl Into<String>) -> Self {
        self.video_ref = Some(video_ref.into());
        self
    }

    /// Checks the record-level invariants. Concept membership is checked
    /// separately against an ontology.
    pub fn validate(&self) -> Result<(), InvalidField> {
        if self.event_id.is_empty() {
            return Err(InvalidField::new("event_id", "must be non-empty"));
        }
        if self.camera_id.is_empty() {
            return Err(InvalidField::new("camera_id", "must be non-empty"));
        }
        if self.timestamp <= 0 {
            return Err(InvalidField::new("timestamp", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(InvalidField::new(
                "confidence",
                format!("{} outside [0,1]", self.confidence),
            ));
        }
        if let Some(b) = &self.bbox {
            let in_unit = |v: f64| (0.0..=1.0).contains(&v);
            if !(in_unit(b.x) && in_unit(b.y) && in_unit(b.w) && in_unit(b.h)) {
                return Err(InvalidField::new("bbox", "components must lie in [0,1]"));
            }
            if b.w <= 0.0 || b.h <= 0.0 {
                return Err(InvalidField::new("bbox", "width and height must be positive"));
            }
        }
        Ok(())
    }

    /// UTC hour of day of the event timestamp.
    pub fn hour_bucket(&self) -> u8 {
        hour_bucket(self.timestamp)
    }
}

/// UTC hour of day (0..=23) for a millisecond timestamp.
pub fn hour_bucket(ts: Millis) -> u8 {
    ts.div_euclid(3_600_000).rem_euclid(24) as u8
}

/// An operator's structured observation and severity rating.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorAnnotation {
    pub annotation_id: String,
    pub operator_id: String,
    pub camera_id: String,
    pub timestamp: Millis,
    pub concept: ConceptId,
    #[serde(default)]
    pub free_text: String,
    pub severity: u8,
}

impl OperatorAnnotation {
    pub fn validate(&self) -> Result<(), InvalidField> {
        if self.annotation_id.is_empty() {
            return Err(InvalidField::new("annotation_id", "must be non-empty"));
        }
        if self.camera_id.is_empty() {
            return Err(InvalidField::new("camera_id", "must be non-empty"));
        }
        if self.timestamp <= 0 {
            return Err(InvalidField::new("timestamp", "must be positive"));
        }
        if self.severity > MAX_SEVERITY {
            return Err(InvalidField::new("severity", format!("{} outside 0..=4", self.severity)));
        }
        if self.free_text.chars().count() > MAX_FREE_TEXT_CHARS {
            return Err(InvalidField::new("free_text", "longer than 2000 characters"));
        }
        Ok(())
    }

    /// Projection into the common event shape: human source, confidence 1.
    pub fn to_event(&self) -> SensorEvent {
        let mut attributes = BTreeMap::new();
        attributes.insert("operator_id".to_owned(), Scalar::Text(self.operator_id.clone()));
        attributes.insert("severity".to_owned(), Scalar::Number(f64::from(self.severity)));
        if !self.free_text.is_empty() {
            attributes.insert("free_text".to_owned(), Scalar::Text(self.free_text.clone()));
        }
        SensorEvent {
            event_id: self.annotation_id.clone(),
            camera_id: self.camera_id.clone(),
            timestamp: self.timestamp,
            concept: self.concept.clone(),
            confidence: 1.0,
            source: Source::Human,
            bbox: None,
            video_ref: None,
            attributes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraStatus {
    #[default]
    Online,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraMeta {
    pub camera_id: String,
    #[serde(default)]
    pub zone: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub longitude: Option<f64>,
    #[serde(default)]
    pub status: CameraStatus,
}

impl CameraMeta {
    pub fn new(camera_id: impl Into<String>, zone: impl Into<String>) -> Self {
        Self {
            camera_id: camera_id.into(),
            zone: zone.into(),
            latitude: None,
            longitude: None,
            status: CameraStatus::Online,
        }
    }

    pub fn validate(&self) -> Result<(), InvalidField> {
        if self.camera_id.is_empty() {
            return Err(InvalidField::new("camera_id", "must be non-empty"));
        }
        if let Some(lat) = self.latitude {
            if !(-90.0..=90.0).contains(&lat) {
                return Err(InvalidField::new("latitude", "outside [-90,90]"));
            }
        }
        if let Some(lon) = self.longitude {
            if !(-180.0..=180.0).contains(&lon) {
                return Err(InvalidField::new("longitude", "outside [-180,180]"));
            }
        }
        Ok(())
    }
}
