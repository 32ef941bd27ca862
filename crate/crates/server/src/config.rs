//! Server configuration, one TOML file.
//!
//! Relative paths resolve against the directory holding the config file.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fusion_core::event::Millis;
use fusion_core::learning::DEFAULT_WINDOW_LENGTH;
use fusion_core::retex::{DEFAULT_ETA, PATTERN_DECAY, RECENCY_DECAY};
use fusion_core::store::RetentionPolicy;
use serde::Deserialize;

const DAY: Millis = 86_400_000;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// TCP listener for sensor feeds.
    pub sensor_listen: SocketAddr,
    /// TCP listener for operator consoles.
    pub console_listen: SocketAddr,
    /// WebSocket listener for browser consoles; same message bodies.
    pub console_ws_listen: Option<SocketAddr>,
    pub data_dir: PathBuf,
    /// Seed ontology when absent.
    pub ontology_path: Option<PathBuf>,
    /// `name = pattern_text` per line.
    pub pattern_file: Option<PathBuf>,
    pub video_retention_ms: Millis,
    pub metadata_retention_ms: Millis,
    /// Event-time interval between retention sweeps; 0 disables them.
    pub retention_sweep_interval_ms: Millis,
    pub eta: f64,
    pub alpha: f64,
    pub operators: u32,
    pub window_length_ms: Millis,
    pub pattern_decay_ms: Millis,
    pub recency_decay_ms: Millis,
    /// Event-time spacing of recommendations.
    pub board_cadence_ms: Millis,
    /// Minimum event-time spacing of alert-triggered recommendations;
    /// alerts inside the gap are folded into the next one. 0 issues one
    /// per alerting message.
    pub alert_board_gap_ms: Millis,
    /// Wall-clock spacing of model snapshot writes.
    pub snapshot_interval_ms: u64,
    /// Queue depth between connections and the pipeline.
    pub queue_depth: usize,
    /// `fdatasync` after every appended record.
    pub fsync: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            sensor_listen: "127.0.0.1:7400".parse().unwrap(),
            console_listen: "127.0.0.1:7401".parse().unwrap(),
            console_ws_listen: Some("127.0.0.1:7402".parse().unwrap()),
            data_dir: PathBuf::from("data"),
            ontology_path: None,
            pattern_file: None,
            video_retention_ms: 30 * DAY,
            metadata_retention_ms: 365 * DAY,
            retention_sweep_interval_ms: 3_600_000,
            eta: DEFAULT_ETA,
            alpha: 1.0,
            operators: 1,
            window_length_ms: DEFAULT_WINDOW_LENGTH,
            pattern_decay_ms: PATTERN_DECAY,
            recency_decay_ms: RECENCY_DECAY,
            board_cadence_ms: 5_000,
            alert_board_gap_ms: 1_000,
            snapshot_interval_ms: 60_000,
            queue_depth: 4096,
            fsync: false,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Config = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.data_dir);
        self.ontology_path.iter_mut().for_each(join);
        self.pattern_file.iter_mut().for_each(join);
    }

    pub fn validate(&self) -> Result<()> {
        RetentionPolicy::new(self.video_retention_ms, self.metadata_retention_ms)?;
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            bail!("eta must be positive, got {}", self.eta);
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            bail!("alpha must be positive, got {}", self.alpha);
        }
        if self.operators < 1 {
            bail!("operators must be at least 1");
        }
        for (name, v) in [
            ("window_length_ms", self.window_length_ms),
            ("pattern_decay_ms", self.pattern_decay_ms),
            ("recency_decay_ms", self.recency_decay_ms),
            ("board_cadence_ms", self.board_cadence_ms),
        ] {
            if v <= 0 {
                bail!("{name} must be positive, got {v}");
            }
        }
        for (name, v) in [
            ("retention_sweep_interval_ms", self.retention_sweep_interval_ms),
            ("alert_board_gap_ms", self.alert_board_gap_ms),
        ] {
            if v < 0 {
                bail!("{name} must not be negative, got {v}");
            }
        }
        if self.queue_depth == 0 {
            bail!("queue_depth must be positive");
        }
        Ok(())
    }

    pub fn retention(&self) -> RetentionPolicy {
        RetentionPolicy { video_retention: self.video_retention_ms, metadata_retention: self.metadata_retention_ms }
    }
}

/// Parses a pattern file: `name = pattern_text` per line, `#` comments.
pub fn parse_pattern_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((name, pattern)) = line.split_once('=') else {
            bail!("pattern file line {}: expected `name = pattern`", i + 1);
        };
        let name = name.trim();
        if name.is_empty() {
            bail!("pattern file line {}: empty pattern name", i + 1);
        }
        if out.iter().any(|(n, _)| n == name) {
            bail!("pattern file line {}: duplicate pattern `{name}`", i + 1);
        }
        out.push((name.to_owned(), pattern.trim().to_owned()));
    }
    Ok(out)
}
