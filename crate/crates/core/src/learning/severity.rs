use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ontology::ConceptId;

use super::{read_snapshot, write_snapshot, ContextKey, LearningError};

pub const SEVERITY_LEVELS: usize = 5;

type Tally = [u64; SEVERITY_LEVELS];

/// Which tally a prediction was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackoffLevel {
    Key,
    HourConcept,
    Concept,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeverityPrediction {
    pub distribution: [f64; SEVERITY_LEVELS],
    pub expectation: f64,
    pub level: BackoffLevel,
}

impl SeverityPrediction {
    /// Most probable rating; ties resolve to the lower rating.
    pub fn argmax(&self) -> u8 {
        let mut best = 0;
        for r in 1..SEVERITY_LEVELS {
            if self.distribution[r] > self.distribution[best] {
                best = r;
            }
        }
        best as u8
    }
}

/// Additively smoothed categorical model of operator ratings per context.
///
/// Predictions back off from the full key to (hour, concept), then to the
/// concept alone, when the more specific tally has fewer than `min_support`
/// ratings. If no level reaches the support, the most specific non-empty
/// tally is used; with no ratings at all the prediction is uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct SeverityModel {
    alpha: f64,
    min_support: u64,
    tallies: BTreeMap<ContextKey, Tally>,
    by_hour_concept: BTreeMap<(u8, ConceptId), Tally>,
    by_concept: BTreeMap<ConceptId, Tally>,
}

impl Default for SeverityModel {
    fn default() -> Self {
        Self::new(1.0)
    }
}

impl SeverityModel {
    pub fn new(alpha: f64) -> Self {
        Self::with_support(alpha, 5)
    }

    pub fn with_support(alpha: f64, min_support: u64) -> Self {
        assert!(alpha > 0.0, "smoothing alpha must be positive");
        Self {
            alpha,
            min_support,
            tallies: BTreeMap::new(),
            by_hour_concept: BTreeMap::new(),
            by_concept: BTreeMap::new(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn update(&mut self, key: &ContextKey, rating: u8) -> Result<(), LearningError> {
        if rating as usize >= SEVERITY_LEVELS {
            return Err(LearningError::InvalidRating(rating));
        }
        if key.hour_bucket > 23 {
            return Err(LearningError::InvalidHour(key.hour_bucket));
        }
        let r = rating as usize;
        self.tallies.entry(key.clone()).or_default()[r] += 1;
        self.by_hour_concept.entry((key.hour_bucket, key.concept.clone())).or_default()[r] += 1;
        self.by_concept.entry(key.concept.clone()).or_default()[r] += 1;
        Ok(())
    }

    pub fn tally(&self, key: &ContextKey) -> Tally {
        self.tallies.get(key).copied().unwrap_or_default()
    }

    pub fn predict(&self, key: &ContextKey) -> SeverityPrediction {
        let levels = [
            (BackoffLevel::Key, self.tallies.get(key)),
            (BackoffLevel::HourConcept, self.by_hour_concept.get(&(key.hour_bucket, key.concept.clone()))),
            (BackoffLevel::Concept, self.by_concept.get(&key.concept)),
        ];
        let total = |t: &Tally| t.iter().sum::<u64>();
        let chosen = levels
            .iter()
            .find(|(_, t)| t.is_some_and(|t| total(t) >= self.min_support))
            .or_else(|| levels.iter().find(|(_, t)| t.is_some_and(|t| total(t) > 0)));
        match chosen {
            Some(&(level, Some(t))) => self.smoothed(t, level),
            _ => self.prior(),
        }
    }

    /// Prediction with no evidence at all.
    pub fn prior(&self) -> SeverityPrediction {
        self.smoothed(&[0; SEVERITY_LEVELS], BackoffLevel::Uniform)
    }

    fn smoothed(&self, tally: &Tally, level: BackoffLevel) -> SeverityPrediction {
        let denom = tally.iter().sum::<u64>() as f64 + SEVERITY_LEVELS as f64 * self.alpha;
        let mut distribution = [0.0; SEVERITY_LEVELS];
        for (p, &t) in distribution.iter_mut().zip(tally) {
            *p = (t as f64 + self.alpha) / denom;
        }
        let expectation = distribution.iter().enumerate().map(|(r, p)| r as f64 * p).sum();
        SeverityPrediction { distribution, expectation, level }
    }

    pub fn len(&self) -> usize {
        self.tallies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tallies.is_empty()
    }

    pub fn snapshot(&self) -> String {
        let records = self.tallies.iter().map(|(k, t)| SnapRecord {
            camera_id: k.camera_id.clone(),
            hour_bucket: k.hour_bucket,
            concept: k.concept.clone(),
            tally: *t,
        });
        write_snapshot(
            "severity",
            SeverityParams { alpha: self.alpha, min_support: self.min_support },
            records.collect::<Vec<_>>(),
        )
    }

    pub fn from_snapshot(text: &str) -> Result<Self, LearningError> {
        let (params, records): (SeverityParams, Vec<SnapRecord>) = read_snapshot("severity", text)?;
        if !(params.alpha > 0.0) {
            return Err(LearningError::Snapshot { line: 1, message: "alpha must be positive".into() });
        }
        let mut m = SeverityModel::with_support(params.alpha, params.min_support);
        for r in records {
            if r.hour_bucket > 23 {
                return Err(LearningError::InvalidHour(r.hour_bucket));
            }
            let key = ContextKey::new(r.camera_id, r.hour_bucket, r.concept);
            for (rating, &n) in r.tally.iter().enumerate() {
                if n == 0 {
                    continue;
                }
                m.tallies.entry(key.clone()).or_default()[rating] += n;
                m.by_hour_concept.entry((key.hour_bucket, key.concept.clone())).or_default()[rating] += n;
                m.by_concept.entry(key.concept.clone()).or_default()[rating] += n;
            }
            m.tallies.entry(key).or_default();
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct SeverityParams {
    alpha: f64,
    min_support: u64,
}

#[derive(Serialize, Deserialize)]
struct SnapRecord {
    camera_id: String,
    hour_bucket: u8,
    concept: ConceptId,
    tally: Tally,
}
