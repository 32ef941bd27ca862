//! Reading recorded streams back for forensic replay.
//!
//! A log is either a wire capture (`sensor_event` / `annotation` lines) or
//! a store segment file; both may be mixed. Records are delivered in
//! timestamp order, file order among equal timestamps.

use std::fs;
use std::path::Path;
use std::time::Duration;

use fusion_core::event::Millis;
use fusion_core::store::{LogLine, Record};
use thiserror::Error;
use tracing::{debug, warn};

use crate::protocol::{Message, Payload};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("corrupt log at line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("reading log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Default)]
pub struct ReplayLog {
    /// Sensor events and annotations in delivery order.
    pub records: Vec<Payload>,
    /// Line number of an unterminated, unparsable final line that was
    /// dropped.
    pub truncated_tail: Option<usize>,
}

fn timestamp(p: &Payload) -> Millis {
    match p {
        Payload::SensorEvent(e) => e.timestamp,
        Payload::Annotation(a) => a.timestamp,
        _ => unreachable!("replay logs only hold events and annotations"),
    }
}

fn parse_line(text: &str) -> Result<Option<Payload>, String> {
    match Message::parse(text) {
        Ok(m) => match m.payload {
            p @ (Payload::SensorEvent(_) | Payload::Annotation(_)) => Ok(Some(p)),
            other => {
                debug!(kind = other.kind(), "skipping non-event message");
                Ok(None)
            }
        },
        Err(wire_err) => match serde_json::from_str::<LogLine>(text) {
            Ok(l) => Ok(Some(match l.record {
                Record::SensorEvent(e) => Payload::SensorEvent(e),
                Record::Annotation(a) => Payload::Annotation(a),
            })),
            Err(_) => Err(wire_err.to_string()),
        },
    }
}

pub fn parse_log(bytes: &[u8]) -> Result<ReplayLog, ReplayError> {
    let text = String::from_utf8_lossy(bytes);
    let terminated = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut log = ReplayLog::default();
    for (i, raw) in lines.iter().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        match parse_line(raw) {
            Ok(Some(p)) => log.records.push(p),
            Ok(None) => {}
            Err(message) if line == lines.len() && !terminated => {
                warn!(line, %message, "dropping truncated final line");
                log.truncated_tail = Some(line);
            }
            Err(message) => return Err(ReplayError::CorruptLog { line, message }),
        }
    }
    log.records.sort_by_key(timestamp);
    Ok(log)
}

pub fn read_log(path: &Path) -> Result<ReplayLog, ReplayError> {
    parse_log(&fs::read(path)?)
}

/// Wall-clock delay before each record at `speed` times real time; all
/// zero for infinite speed.
pub fn schedule(records: &[Payload], speed: f64) -> Vec<Duration> {
    let Some(first) = records.first().map(timestamp) else {
        return Vec::new();
    };
    records
        .iter()
        .map(|r| {
            if speed.is_infinite() {
                Duration::ZERO
            } else {
                Duration::from_secs_f64((timestamp(r) - first).max(0) as f64 / 1000.0 / speed)
            }
        })
        .collect()
}
