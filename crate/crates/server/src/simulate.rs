//! Seeded synthetic sensor feeds.
//!
//! Background events follow a Poisson process per (camera, concept), with
//! rates given in events per baseline window and optionally varying by hour
//! of day. Scripted injections are placed at exact offsets on top.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use fusion_core::event::{hour_bucket, CameraMeta, Millis, Scalar, SensorEvent};
use fusion_core::learning::DEFAULT_WINDOW_LENGTH;
use fusion_core::ontology::{ConceptId, Ontology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Message, Payload};

/// 2024-01-01T00:00:00Z.
pub const DEFAULT_START: Millis = 1_704_067_200_000;
const HOUR: Millis = 3_600_000;

#[derive(Debug, Error, PartialEq)]
#[error("invalid script: {0}")]
pub struct InvalidScript(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseRate {
    pub concept: ConceptId,
    /// Hour of day (UTC) the rate applies to; every hour when absent.
    #[serde(default)]
    pub hour: Option<u8>,
    /// Restricts the rate to one camera; every camera when absent.
    #[serde(default)]
    pub camera_id: Option<String>,
    /// Expected events per window.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub offset_ms: Millis,
    pub camera_id: String,
    pub concepts: Vec<ConceptId>,
    #[serde(default)]
    pub spacing_ms: Millis,
    #[serde(default = "default_injection_confidence")]
    pub confidence: f64,
}

fn default_injection_confidence() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start: Millis,
    pub duration_ms: Millis,
    #[serde(default = "default_window")]
    pub window_length_ms: Millis,
    pub cameras: Vec<CameraMeta>,
    #[serde(default)]
    pub base_rates: Vec<BaseRate>,
    #[serde(default)]
    pub injections: Vec<Injection>,
}

fn default_start() -> Millis {
    DEFAULT_START
}

fn default_window() -> Millis {
    DEFAULT_WINDOW_LENGTH
}

impl ScenarioScript {
    /// Reads a TOML script, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading script {}", path.display()))?;
        let script = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("parsing script {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing script {}", path.display()))?
        };
        Ok(script)
    }

    pub fn validate(&self, ontology: &Ontology) -> Result<(), InvalidScript> {
        let bad = |m: String| Err(InvalidScript(m));
        if self.duration_ms <= 0 {
            return bad("duration_ms must be positive".into());
        }
        if self.window_length_ms <= 0 {
            return bad("window_length_ms must be positive".into());
        }
        if self.start <= 0 {
            return bad("start must be positive".into());
        }
        if self.cameras.is_empty() {
            return bad("at least one camera is required".into());
        }
        let mut ids = BTreeSet::new();
        for c in &self.cameras {
            c.validate().map_err(|e| InvalidScript(e.to_string()))?;
            if !ids.insert(c.camera_id.as_str()) {
                return bad(format!("camera `{}` listed twice", c.camera_id));
            }
        }
        for r in &self.base_rates {
            if !(r.rate >= 0.0 && r.rate.is_finite()) {
                return bad(format!("rate for `{}` must be finite and non-negative", r.concept));
            }
            if r.hour.is_some_and(|h| h > 23) {
                return bad(format!("hour {:?} outside 0..=23", r.hour));
            }
            if let Some(c) = &r.camera_id {
                if !ids.contains(c.as_str()) {
                    return bad(format!("base rate for unknown camera `{c}`"));
                }
            }
            ontology.validate_term(r.concept.as_str()).map_err(|e| InvalidScript(e.to_string()))?;
        }
        for inj in &self.injections {
            if !ids.contains(inj.camera_id.as_str()) {
                return bad(format!("injection on unknown camera `{}`", inj.camera_id));
            }
            if inj.concepts.is_empty() {
                return bad("injection without concepts".into());
            }
            if inj.spacing_ms < 0 {
                return bad("spacing_ms must not be negative".into());
            }
            let last = inj.offset_ms + inj.spacing_ms * (inj.concepts.len() as Millis - 1);
            if inj.offset_ms < 0 || last >= self.duration_ms {
                return bad(format!("injection at {}..={} outside the duration", inj.offset_ms, last));
            }
            if !(0.0..=1.0).contains(&inj.confidence) {
                return bad("injection confidence outside [0,1]".into());
            }
            for c in &inj.concepts {
                ontology.validate_term(c.as_str()).map_err(|e| InvalidScript(e.to_string()))?;
            }
        }
        Ok(())
    }
}

/// Generates the scenario's events in `(timestamp, event_id)` order with ids
/// `ev-00000001`, `ev-00000002`, ...
pub fn simulate(script: &ScenarioScript, ontology: &Ontology) -> Result<Vec<SensorEvent>, InvalidScript> {
    script.validate(ontology)?;
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
    let end = script.start + script.duration_ms;
    // (timestamp, camera index, generation order) keeps the sort total.
    let mut raw: Vec<(Millis, usize, usize, ConceptId, f64)> = Vec::new();

    for (ci, cam) in script.cameras.iter().enumerate() {
        for rate in script.base_rates.iter().filter(|r| r.camera_id.as_ref().is_none_or(|c| *c == cam.camera_id)) {
            if rate.rate == 0.0 {
                continue;
            }
            let per_ms = rate.rate / script.window_length_ms as f64;
            let gap = Exp::new(per_ms).expect("positive rate");
            // Hour-restricted rates run piecewise over matching hours; the
            // process is memoryless so restarting at each boundary is exact.
            let mut seg_start = script.start;
            while seg_start < end {
                let seg_end = ((seg_start.div_euclid(HOUR) + 1) * HOUR).min(end);
                if rate.hour.is_none_or(|h| h == hour_bucket(seg_start)) {
                    let mut t = seg_start as f64;
                    loop {
                        t += gap.sample(&mut rng);
                        let ts = t.floor() as Millis;
                        if ts >= seg_end {
                            break;
                        }
                        let confidence = (rng.gen_range(50..=99) as f64) / 100.0;
                        let order = raw.len();
                        raw.push((ts, ci, order, rate.concept.clone(), confidence));
                    }
                }
                seg_start = seg_end;
            }
        }
    }
    for inj in &script.injections {
        let ci = script.cameras.iter().position(|c| c.camera_id == inj.camera_id).expect("validated");
        for (k, concept) in inj.concepts.iter().enumerate() {
            let ts = script.start + inj.offset_ms + inj.spacing_ms * k as Millis;
            let order = raw.len();
            raw.push((ts, ci, order, concept.clone(), inj.confidence));
        }
    }
    raw.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));

    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(i, (ts, ci, _, concept, confidence))| {
            let cam = &script.cameras[ci];
            SensorEvent::new(format!("ev-{:08}", i + 1), cam.camera_id.clone(), ts, concept, confidence)
                .with_attribute("zone", Scalar::Text(cam.zone.clone()))
        })
        .collect())
}

/// Events as wire lines, `seq` counting from 1.
pub fn to_wire(events: &[SensorEvent]) -> String {
    let mut out = String::new();
    for (i, e) in events.iter().enumerate() {
        out.push_str(&Message::new(i as u64 + 1, Payload::SensorEvent(e.clone())).to_line());
        out.push('\n');
    }
    out
}
