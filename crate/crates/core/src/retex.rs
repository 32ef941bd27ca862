//! Camera prioritization and the operator feedback loop.
//!
//! Each camera gets four bounded risk components (anomaly, severity,
//! pattern, recency). Risk is their weighted sum, the board is the top
//! `16 × operators` cameras, and operator accept/dismiss feedback moves the
//! weights with a multiplicative-weights update.

use std::collections::{HashSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::Millis;
use crate::learning::{anomaly_score, Baseline, ContextKey, SeverityModel, WindowCounts};

/// Cameras a single operator can watch at once.
pub const CAMERAS_PER_OPERATOR: usize = 16;
pub const DEFAULT_ETA: f64 = 0.1;
/// Pattern alert decay constant, 10 minutes.
pub const PATTERN_DECAY: Millis = 600_000;
/// Recency decay constant, 20 minutes.
pub const RECENCY_DECAY: Millis = 1_200_000;
pub const COMPONENT_NAMES: [&str; 4] = ["anomaly", "severity", "pattern", "recency"];

/// Floor applied after each update so weights stay strictly positive.
const MIN_WEIGHT: f64 = 1e-12;
const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetexError {
    #[error("operators must be at least 1, got {0}")]
    InvalidBudget(u32),
    #[error("weights must be positive and sum to 1: {0:?}")]
    InvalidWeights([f64; 4]),
    #[error("component {name} of camera `{camera_id}` is {value}, outside [0,1]")]
    InvalidComponent { camera_id: String, name: &'static str, value: f64 },
    #[error("camera `{0}` appears twice in the snapshot")]
    DuplicateCamera(String),
    #[error("unknown recommendation `{0}`")]
    UnknownRecommendation(String),
    #[error("camera `{camera_id}` is not on recommendation `{recommendation_id}`")]
    CameraNotOnBoard { recommendation_id: String, camera_id: String },
    #[error("invalid weights snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Components {
    pub anomaly: f64,
    pub severity: f64,
    pub pattern: f64,
    pub recency: f64,
}

impl Components {
    pub fn new(anomaly: f64, severity: f64, pattern: f64, recency: f64) -> Self {
        Self { anomaly, severity, pattern, recency }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.anomaly, self.severity, self.pattern, self.recency]
    }

    fn check(&self, camera_id: &str) -> Result<(), RetexError> {
        for (name, value) in COMPONENT_NAMES.iter().zip(self.to_array()) {
            if !(0.0..=1.0).contains(&value) {
                return Err(RetexError::InvalidComponent {
                    camera_id: camera_id.to_owned(),
                    name,
                    value,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskWeights {
    pub w_anomaly: f64,
    pub w_severity: f64,
    pub w_pattern: f64,
    pub w_recency: f64,
}

impl Default for RiskWeights {
    fn default() -> Self {
        Self::from_array([0.25; 4])
    }
}

impl RiskWeights {
    pub fn new(w: [f64; 4]) -> Result<Self, RetexError> {
        let sum: f64 = w.iter().sum();
        if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) || (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(RetexError::InvalidWeights(w));
        }
        Ok(Self::from_array(w))
    }

    /// Normalizes arbitrary positive weights onto the simplex.
    pub fn normalized(w: [f64; 4]) -> Result<Self, RetexError> {
        let sum: f64 = w.iter().sum();
        if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(RetexError::InvalidWeights(w));
        }
        Self::new(w.map(|x| x / sum))
    }

    fn from_array(w: [f64; 4]) -> Self {
        Self { w_anomaly: w[0], w_severity: w[1], w_pattern: w[2], w_recency: w[3] }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w_anomaly, self.w_severity, self.w_pattern, self.w_recency]
    }

    pub fn risk(&self, c: &Components) -> f64 {
        self.to_array().iter().zip(c.to_array()).map(|(w, x)| w * x).sum()
    }
}

/// What the component computation needs to know about one camera.
#[derive(Debug, Clone, Copy)]
pub struct CameraInputs<'a> {
    pub camera_id: &'a str,
    /// Concept counts of the camera's current window.
    pub window: &'a WindowCounts,
    /// End time of the most recent pattern match attributed to the camera.
    pub last_alert: Option<Millis>,
    pub last_event: Option<Millis>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayConstants {
    pub pattern: Millis,
    pub recency: Millis,
}

impl Default for DecayConstants {
    fn default() -> Self {
        Self { pattern: PATTERN_DECAY, recency: RECENCY_DECAY }
    }
}

/// Squashes the four risk signals of one camera into `[0,1]`.
pub fn compute_components(
    camera: &CameraInputs<'_>,
    now: Millis,
    baseline: &Baseline,
    severity: &SeverityModel,
    decay: DecayConstants,
) -> Components {
    let hour = crate::event::hour_bucket(now);
    let a = anomaly_score(baseline, camera.camera_id, hour, camera.window);
    let anomaly = a / (1.0 + a);

    let severity = camera
        .window
        .keys()
        .map(|c| severity.predict(&ContextKey::new(camera.camera_id, hour, c.clone())).expectation)
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |m| m.max(x))))
        .unwrap_or_else(|| severity.prior().expectation)
        / 4.0;

    let decayed = |t: Option<Millis>, tau: Millis| {
        t.map_or(0.0, |t| (-((now - t).max(0) as f64) / tau as f64).exp())
    };
    Components {
        anomaly,
        severity: severity.clamp(0.0, 1.0),
        pattern: decayed(camera.last_alert, decay.pattern),
        recency: decayed(camera.last_event, decay.recency),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSnapshot {
    pub camera_id: String,
    pub components: Components,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRisk {
    pub camera_id: String,
    pub components: Components,
    pub risk: f64,
    pub rank: u32,
}

/// Ranked board of cameras, capped by the attention budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub cameras: Vec<CameraRisk>,
    pub budget: usize,
}

/// Orders cameras by risk (ties by camera id) and keeps the top
/// `16 × operators`.
pub fn rank_cameras(
    snapshot: &[CameraSnapshot],
    weights: &RiskWeights,
    operators: u32,
) -> Result<Ranking, RetexError> {
    if operators < 1 {
        return Err(RetexError::InvalidBudget(operators));
    }
    let budget = CAMERAS_PER_OPERATOR * operators as usize;
    let mut ids = HashSet::with_capacity(snapshot.len());
    let mut scored = Vec::with_capacity(snapshot.len());
    for c in snapshot {
        if !ids.insert(c.camera_id.as_str()) {
            return Err(RetexError::DuplicateCamera(c.camera_id.clone()));
        }
        c.components.check(&c.camera_id)?;
        scored.push((weights.risk(&c.components), c));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.camera_id.cmp(&b.1.camera_id)));
    let cameras = scored
        .into_iter()
        .take(budget)
        .enumerate()
        .map(|(i, (risk, c))| CameraRisk {
            camera_id: c.camera_id.clone(),
            components: c.components,
            risk,
            rank: i as u32 + 1,
        })
        .collect();
    Ok(Ranking { cameras, budget })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub recommendation_id: String,
    pub issued_at: Millis,
    pub cameras: Vec<CameraRisk>,
    pub budget: usize,
    /// Weights the risks were computed with.
    pub weights: RiskWeights,
}

impl Recommendation {
    pub fn camera(&self, camera_id: &str) -> Option<&CameraRisk> {
        self.cameras.iter().find(|c| c.camera_id == camera_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accept,
    Dismiss,
}

impl Outcome {
    fn sign(self) -> f64 {
        match self {
            Outcome::Accept => 1.0,
            Outcome::Dismiss => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub recommendation_id: String,
    pub camera_id: String,
    pub outcome: Outcome,
    #[serde(default)]
    pub operator_id: String,
    #[serde(default)]
    pub timestamp: Millis,
}

/// `w_i ← w_i · exp(η · s · c_i)`, renormalized, with `s = ±1` for
/// accept/dismiss and `c` the camera's components on the recommendation.
pub fn apply_feedback(
    weights: &RiskWeights,
    recommendation: &Recommendation,
    feedback: &Feedback,
    eta: f64,
) -> Result<RiskWeights, RetexError> {
    if feedback.recommendation_id != recommendation.recommendation_id {
        return Err(RetexError::UnknownRecommendation(feedback.recommendation_id.clone()));
    }
    let camera = recommendation.camera(&feedback.camera_id).ok_or_else(|| {
        RetexError::CameraNotOnBoard {
            recommendation_id: recommendation.recommendation_id.clone(),
            camera_id: feedback.camera_id.clone(),
        }
    })?;
    Ok(multiplicative_update(weights, &camera.components, feedback.outcome.sign() * eta))
}

fn multiplicative_update(weights: &RiskWeights, c: &Components, step: f64) -> RiskWeights {
    // Log domain keeps extreme histories from overflowing.
    let logs: Vec<f64> = weights
        .to_array()
        .iter()
        .zip(c.to_array())
        .map(|(w, x)| w.ln() + step * x)
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w = [0.0; 4];
    for (wi, l) in w.iter_mut().zip(&logs) {
        *wi = (l - top).exp();
    }
    let sum: f64 = w.iter().sum();
    w = w.map(|x| (x / sum).max(MIN_WEIGHT));
    let sum: f64 = w.iter().sum();
    RiskWeights::from_array(w.map(|x| x / sum))
}

/// Per-component breakdown of one camera's risk, rounded to three decimals
/// so that the displayed contributions add up to the displayed risk.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub camera_id: String,
    pub rank: u32,
    pub values: [f64; 4],
    pub weights: [f64; 4],
    /// Displayed contributions in thousandths.
    pub contributions_milli: [i64; 4],
    pub risk_milli: i64,
}

impl Explanation {
    pub fn text(&self) -> String {
        let mut out = String::with_capacity(128);
        let _ = write!(out, "{} rank {} risk {}:", self.camera_id, self.rank, Milli(self.risk_milli));
        for i in 0..4 {
            let sep = if i == 0 { " " } else { ", " };
            let _ = write!(
                out,
                "{sep}{} {}*{}={}",
                COMPONENT_NAMES[i],
                Milli::of(self.values[i]),
                Milli::of(self.weights[i]),
                Milli(self.contributions_milli[i])
            );
        }
        out
    }
}

/// Non-negative thousandths shown with three decimals. Integer formatting
/// keeps board rendering cheap; `{:.3}` on floats is not.
struct Milli(i64);

impl Milli {
    fn of(x: f64) -> Self {
        Milli((x * 1000.0).round() as i64)
    }
}

impl std::fmt::Display for Milli {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{:03}", self.0 / 1000, self.0 % 1000)
    }
}

pub fn explain(r: &Recommendation, camera_id: &str) -> Result<Explanation, RetexError> {
    let cam = r.camera(camera_id).ok_or_else(|| RetexError::CameraNotOnBoard {
        recommendation_id: r.recommendation_id.clone(),
        camera_id: camera_id.to_owned(),
    })?;
    let values = cam.components.to_array();
    let weights = r.weights.to_array();
    let exact: Vec<f64> = values.iter().zip(&weights).map(|(v, w)| v * w * 1000.0).collect();
    let risk_milli = (cam.risk * 1000.0).round() as i64;

    // Largest-remainder rounding onto the rounded total.
    let mut contributions_milli = [0i64; 4];
    for (c, e) in contributions_milli.iter_mut().zip(&exact) {
        *c = e.floor() as i64;
    }
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = risk_milli - contributions_milli.iter().sum::<i64>();
    for &i in order.iter().cycle().take(8) {
        if missing == 0 {
            break;
        }
        if missing > 0 {
            contributions_milli[i] += 1;
            missing -= 1;
        } else if contributions_milli[i] > 0 {
            contributions_milli[i] -= 1;
            missing += 1;
        }
    }
    Ok(Explanation {
        camera_id: cam.camera_id.clone(),
        rank: cam.rank,
        values,
        weights,
        contributions_milli,
        risk_milli,
    })
}

/// Owns the live weights and the recently issued recommendations.
#[derive(Debug, Clone)]
pub struct RetexEngine {
    weights: RiskWeights,
    eta: f64,
    operators: u32,
    live_limit: usize,
    live: VecDeque<Recommendation>,
    issued: u64,
}

impl RetexEngine {
    pub fn new(eta: f64, operators: u32) -> Result<Self, RetexError> {
        if operators < 1 {
            return Err(RetexError::InvalidBudget(operators));
        }
        Ok(Self {
            weights: RiskWeights::default(),
            eta,
            operators,
            live_limit: 64,
            live: VecDeque::new(),
            issued: 0,
        })
    }

    pub fn with_weights(mut self, weights: RiskWeights) -> Self {
        self.weights = weights;
        self
    }

    /// How many past recommendations still accept feedback.
    pub fn with_live_limit(mut self, n: usize) -> Self {
        self.live_limit = n.max(1);
        self
    }

    pub fn weights(&self) -> RiskWeights {
        self.weights
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn operators(&self) -> u32 {
        self.operators
    }

    pub fn issue(&mut self, snapshot: &[CameraSnapshot], now: Millis) -> Result<Recommendation, RetexError> {
        let ranking = rank_cameras(snapshot, &self.weights, self.operators)?;
        self.issued += 1;
        let rec = Recommendation {
            recommendation_id: format!("rec-{:08}", self.issued),
            issued_at: now,
            cameras: ranking.cameras,
            budget: ranking.budget,
            weights: self.weights,
        };
        if self.live.len() == self.live_limit {
            self.live.pop_front();
        }
        self.live.push_back(rec.clone());
        Ok(rec)
    }

    pub fn recommendation(&self, id: &str) -> Option<&Recommendation> {
        self.live.iter().rev().find(|r| r.recommendation_id == id)
    }

    pub fn latest(&self) -> Option<&Recommendation> {
        self.live.back()
    }

    pub fn feedback(&mut self, fb: &Feedback) -> Result<RiskWeights, RetexError> {
        let rec = self
            .recommendation(&fb.recommendation_id)
            .ok_or_else(|| RetexError::UnknownRecommendation(fb.recommendation_id.clone()))?;
        self.weights = apply_feedback(&self.weights, rec, fb, self.eta)?;
        Ok(self.weights)
    }

    /// Weights and issue counter, one JSON object per line.
    pub fn snapshot(&self) -> String {
        let header = serde_json::json!({"format": "retex", "version": 1, "eta": self.eta, "issued": self.issued});
        format!("{header}\n{}\n", serde_json::to_string(&self.weights).expect("weights serialize"))
    }

    pub fn restore(&mut self, text: &str) -> Result<(), RetexError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: serde_json::Value = lines
            .next()
            .and_then(|l| serde_json::from_str(l).ok())
            .ok_or_else(|| RetexError::Snapshot("missing header".into()))?;
        if header["format"] != "retex" || header["version"] != 1 {
            return Err(RetexError::Snapshot(format!("unexpected header {header}")));
        }
        let weights: RiskWeights = lines
            .next()
            .and_then(|l| serde_json::from_str(l).ok())
            .ok_or_else(|| RetexError::Snapshot("missing weights".into()))?;
        self.weights = RiskWeights::new(weights.to_array())?;
        self.issued = header["issued"].as_u64().unwrap_or(0);
        Ok(())
    }
}
