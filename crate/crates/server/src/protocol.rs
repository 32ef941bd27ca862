//! Wire format shared by sensors and consoles.
//!
//! One UTF-8 JSON object per line: `{"kind":..,"seq":..,"payload":{..}}`.
//! The WebSocket gateway carries the same objects, one per text frame.

use fusion_core::event::{Millis, OperatorAnnotation, SensorEvent};
use fusion_core::learning::ContextKey;
use fusion_core::ontology::ConceptId;
use fusion_core::retex::{Components, Feedback};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    MalformedMessage(String),
    #[error("unknown kind `{0}`")]
    UnknownKind(String),
    #[error("missing field `{0}`")]
    MissingField(String),
}

impl ProtocolError {
    pub fn code(&self) -> &'static str {
        match self {
            ProtocolError::MalformedMessage(_) => "malformed_message",
            ProtocolError::UnknownKind(_) => "unknown_kind",
            ProtocolError::MissingField(_) => "missing_field",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub camera_id: String,
    pub hour_bucket: u8,
    pub concept: ConceptId,
    pub rating: u8,
}

impl Rating {
    pub fn key(&self) -> ContextKey {
        ContextKey::new(self.camera_id.clone(), self.hour_bucket, self.concept.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddPattern {
    pub name: String,
    pub pattern_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Sensor,
    Console,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscribe {
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardCamera {
    pub camera_id: String,
    pub risk: f64,
    pub components: Components,
    pub rank: u32,
    pub explain_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardUpdate {
    pub recommendation_id: String,
    pub issued_at: Millis,
    #[serde(default)]
    pub budget: usize,
    pub cameras: Vec<BoardCamera>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub pattern: String,
    pub event_ids: Vec<String>,
    pub camera_id: String,
    #[serde(default)]
    pub start: Millis,
    #[serde(default)]
    pub end: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub seq: u64,
    pub code: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    SensorEvent(SensorEvent),
    Annotation(OperatorAnnotation),
    Rating(Rating),
    Feedback(Feedback),
    AddPattern(AddPattern),
    Subscribe(Subscribe),
    BoardUpdate(BoardUpdate),
    Alert(Alert),
    Ack(Ack),
    Error(ErrorReply),
}

/// Wire kinds with the payload fields each one requires.
pub const KINDS: [(&str, &[&str]); 10] = [
    ("sensor_event", &["event_id", "camera_id", "timestamp", "concept", "confidence"]),
    ("annotation", &["annotation_id", "operator_id", "camera_id", "timestamp", "concept", "severity"]),
    ("rating", &["camera_id", "hour_bucket", "concept", "rating"]),
    ("feedback", &["recommendation_id", "camera_id", "outcome"]),
    ("add_pattern", &["name", "pattern_text"]),
    ("subscribe", &["role"]),
    ("board_update", &["recommendation_id", "issued_at", "cameras"]),
    ("alert", &["pattern", "event_ids", "camera_id"]),
    ("ack", &["seq"]),
    ("error", &["seq", "code", "detail"]),
];

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::SensorEvent(_) => "sensor_event",
            Payload::Annotation(_) => "annotation",
            Payload::Rating(_) => "rating",
            Payload::Feedback(_) => "feedback",
            Payload::AddPattern(_) => "add_pattern",
            Payload::Subscribe(_) => "subscribe",
            Payload::BoardUpdate(_) => "board_update",
            Payload::Alert(_) => "alert",
            Payload::Ack(_) => "ack",
            Payload::Error(_) => "error",
        }
    }

    /// Whether a client may send this kind to the server.
    pub fn is_inbound(&self) -> bool {
        matches!(
            self,
            Payload::SensorEvent(_)
                | Payload::Annotation(_)
                | Payload::Rating(_)
                | Payload::Feedback(_)
                | Payload::AddPattern(_)
                | Payload::Subscribe(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub seq: u64,
    pub payload: Payload,
}

#[derive(Serialize)]
struct Wire<'a, T> {
    kind: &'a str,
    seq: u64,
    payload: &'a T,
}

fn line<T: Serialize>(kind: &str, seq: u64, payload: &T) -> String {
    serde_json::to_string(&Wire { kind, seq, payload }).expect("wire payloads serialize")
}

impl Message {
    pub fn new(seq: u64, payload: Payload) -> Self {
        Self { seq, payload }
    }

    /// Single-line JSON; embedded newlines in strings are escaped.
    pub fn to_line(&self) -> String {
        let (kind, seq) = (self.payload.kind(), self.seq);
        match &self.payload {
            Payload::SensorEvent(p) => line(kind, seq, p),
            Payload::Annotation(p) => line(kind, seq, p),
            Payload::Rating(p) => line(kind, seq, p),
            Payload::Feedback(p) => line(kind, seq, p),
            Payload::AddPattern(p) => line(kind, seq, p),
            Payload::Subscribe(p) => line(kind, seq, p),
            Payload::BoardUpdate(p) => line(kind, seq, p),
            Payload::Alert(p) => line(kind, seq, p),
            Payload::Ack(p) => line(kind, seq, p),
            Payload::Error(p) => line(kind, seq, p),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| ProtocolError::MalformedMessage(e.to_string()))?;
        let Value::Object(mut obj) = value else {
            return Err(ProtocolError::MalformedMessage("expected a JSON object".into()));
        };
        let kind = match obj.get("kind") {
            None => return Err(ProtocolError::MissingField("kind".into())),
            Some(Value::String(k)) => k.clone(),
            Some(other) => return Err(ProtocolError::UnknownKind(other.to_string())),
        };
        let Some(&(_, required)) = KINDS.iter().find(|(k, _)| *k == kind) else {
            return Err(ProtocolError::UnknownKind(kind));
        };
        let seq = match obj.get("seq") {
            None => return Err(ProtocolError::MissingField("seq".into())),
            Some(v) => v
                .as_u64()
                .ok_or_else(|| ProtocolError::MalformedMessage(format!("seq must be an unsigned integer, got {v}")))?,
        };
        let payload = match obj.remove("payload") {
            None => return Err(ProtocolError::MissingField("payload".into())),
            Some(Value::Object(p)) => p,
            Some(_) => return Err(ProtocolError::MalformedMessage("payload must be an object".into())),
        };
        if let Some(missing) = required.iter().find(|f| !payload.contains_key(**f)) {
            return Err(ProtocolError::MissingField((*missing).to_owned()));
        }
        let payload = match kind.as_str() {
            "sensor_event" => Payload::SensorEvent(decode(payload)?),
            "annotation" => Payload::Annotation(decode(payload)?),
            "rating" => Payload::Rating(decode(payload)?),
            "feedback" => Payload::Feedback(decode(payload)?),
            "add_pattern" => Payload::AddPattern(decode(payload)?),
            "subscribe" => Payload::Subscribe(decode(payload)?),
            "board_update" => Payload::BoardUpdate(decode(payload)?),
            "alert" => Payload::Alert(decode(payload)?),
            "ack" => Payload::Ack(decode(payload)?),
            "error" => Payload::Error(decode(payload)?),
            _ => unreachable!("kind checked against KINDS"),
        };
        Ok(Message { seq, payload })
    }
}

fn decode<T: DeserializeOwned>(payload: Map<String, Value>) -> Result<T, ProtocolError> {
    serde_json::from_value(Value::Object(payload)).map_err(|e| ProtocolError::MalformedMessage(e.to_string()))
}
