use std::collections::{HashSet, VecDeque};
use std::sync::Arc;

use crate::event::{Millis, SensorEvent};
use crate::ontology::Ontology;

use super::{Match, PatternAst, PatternError, Scope};

const MAX_TERMS: usize = 64;

/// Flattened pattern: terms in order plus the window/scope constraint of
/// every sequence as an inclusive term range.
#[derive(Debug)]
struct Plan {
    pattern_text: String,
    /// Per term, the concept ids it accepts.
    accepts: Vec<HashSet<String>>,
    min_confidence: Vec<f64>,
    groups: Vec<Group>,
    /// Span bound of the whole pattern; `None` for a lone term.
    window: Option<Millis>,
}

#[derive(Debug, Clone, Copy)]
struct Group {
    lo: usize,
    hi: usize,
    within: Millis,
    same_camera: bool,
}

impl Plan {
    fn compile(ast: &PatternAst, ontology: &Ontology) -> Result<Self, PatternError> {
        if ast.term_count() > MAX_TERMS {
            return Err(PatternError::Syntax {
                position: 0,
                expected: format!("at most {MAX_TERMS} terms"),
            });
        }
        let mut plan = Plan {
            pattern_text: ast.to_string(),
            accepts: Vec::new(),
            min_confidence: Vec::new(),
            groups: Vec::new(),
            window: match ast {
                PatternAst::Seq { within, .. } => Some(*within),
                PatternAst::Term { .. } => None,
            },
        };
        plan.flatten(ast, ontology)?;
        Ok(plan)
    }

    fn flatten(&mut self, ast: &PatternAst, ontology: &Ontology) -> Result<(), PatternError> {
        match ast {
            PatternAst::Term { concept, min_confidence } => {
                ontology.validate_term(concept.as_str())?;
                let accepts = ontology
                    .ids()
                    .filter(|id| ontology.is_a(id.as_str(), concept.as_str()))
                    .map(|id| id.as_str().to_owned())
                    .collect();
                self.accepts.push(accepts);
                self.min_confidence.push(*min_confidence);
            }
            PatternAst::Seq { children, within, scope } => {
                let lo = self.accepts.len();
                for c in children {
                    self.flatten(c, ontology)?;
                }
                self.groups.push(Group {
                    lo,
                    hi: self.accepts.len() - 1,
                    within: *within,
                    same_camera: *scope == Scope::SameCamera,
                });
            }
        }
        Ok(())
    }

    fn terms(&self) -> usize {
        self.accepts.len()
    }

    fn term_mask(&self, e: &SensorEvent) -> u64 {
        let mut mask = 0;
        for k in 0..self.terms() {
            if e.confidence >= self.min_confidence[k] && self.accepts[k].contains(e.concept.as_str()) {
                mask |= 1 << k;
            }
        }
        mask
    }

    /// Looks for the latest-start assignment closing at `last`.
    fn close<B: Buffer>(&self, buffer: &B, last: &Slot) -> Option<Match> {
        let n = self.terms();
        let mut assigned: Vec<Option<usize>> = vec![None; n];
        let mut search = Search { plan: self, buffer, last, assigned: &mut assigned, failed: HashSet::new() };
        if n > 1 && !search.assign(n - 2) {
            return None;
        }
        let mut slots: Vec<&Slot> = assigned[..n - 1].iter().map(|i| buffer.at(i.unwrap())).collect();
        slots.push(last);
        Some(Match {
            event_ids: slots.iter().map(|s| s.event_id.to_string()).collect(),
            start: slots[0].ts,
            end: last.ts,
            pattern_text: self.pattern_text.clone(),
            camera_id: last.camera.to_string(),
        })
    }
}

/// The parts of an event the matcher retains.
#[derive(Debug, Clone)]
struct Slot {
    ts: Millis,
    event_id: Arc<str>,
    camera: Arc<str>,
    mask: u64,
}

impl Slot {
    fn of(e: &SensorEvent, mask: u64) -> Self {
        Slot {
            ts: e.timestamp,
            event_id: Arc::from(e.event_id.as_str()),
            camera: Arc::from(e.camera_id.as_str()),
            mask,
        }
    }
}

/// Candidate events sorted by `(timestamp, event_id)`.
trait Buffer {
    fn len(&self) -> usize;
    fn at(&self, i: usize) -> &Slot;

    /// First index whose timestamp is not below `ts`.
    fn lower_bound(&self, ts: Millis) -> usize {
        let (mut lo, mut hi) = (0, self.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.at(mid).ts < ts {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

impl Buffer for Vec<Slot> {
    fn len(&self) -> usize {
        Vec::len(self)
    }
    fn at(&self, i: usize) -> &Slot {
        &self[i]
    }
}

impl Buffer for VecDeque<Slot> {
    fn len(&self) -> usize {
        VecDeque::len(self)
    }
    fn at(&self, i: usize) -> &Slot {
        &self[i]
    }
}

struct Search<'a, B: Buffer> {
    plan: &'a Plan,
    buffer: &'a B,
    last: &'a Slot,
    assigned: &'a mut Vec<Option<usize>>,
    /// Dead ends keyed by (term, successor, anchors of the groups open at term).
    failed: HashSet<(usize, usize, Vec<usize>)>,
}

impl<B: Buffer> Search<'_, B> {
    fn slot(&self, k: usize) -> &Slot {
        match self.assigned[k] {
            Some(i) => self.buffer.at(i),
            None => self.last,
        }
    }

    /// Assigns terms `k, k-1, ..., 0`, trying later candidates first.
    fn assign(&mut self, k: usize) -> bool {
        let plan = self.plan;
        let open: Vec<Group> =
            plan.groups.iter().copied().filter(|g| g.lo <= k && k < g.hi).collect();
        let successor = self.assigned[k + 1].unwrap_or(usize::MAX);
        let key = (k, successor, open.iter().map(|g| self.assigned[g.hi].unwrap_or(usize::MAX)).collect());
        if self.failed.contains(&key) {
            return false;
        }

        let next_ts = self.slot(k + 1).ts;
        let floor = open.iter().map(|g| self.slot(g.hi).ts - g.within).max().unwrap_or(Millis::MIN);
        let cameras: Vec<Arc<str>> = open
            .iter()
            .filter(|g| g.same_camera)
            .map(|g| self.slot(g.hi).camera.clone())
            .collect();

        let mut i = self.buffer.lower_bound(next_ts);
        while i > 0 {
            i -= 1;
            let cand = self.buffer.at(i);
            if cand.ts < floor {
                break;
            }
            if cand.mask & (1 << k) == 0 || cameras.iter().any(|c| *c != cand.camera) {
                continue;
            }
            self.assigned[k] = Some(i);
            if k == 0 || self.assign(k - 1) {
                return true;
            }
        }
        self.assigned[k] = None;
        self.failed.insert(key);
        false
    }
}

/// Batch matcher for one pattern.
#[derive(Debug, Clone)]
pub struct Matcher {
    plan: Arc<Plan>,
}

impl Matcher {
    pub fn new(ast: &PatternAst, ontology: &Ontology) -> Result<Self, PatternError> {
        Ok(Self { plan: Arc::new(Plan::compile(ast, ontology)?) })
    }

    pub fn pattern_text(&self) -> &str {
        &self.plan.pattern_text
    }

    /// All minimal matches in `events`, which must be sorted by
    /// `(timestamp, event_id)`. Output is ordered by end time.
    pub fn match_events(&self, events: &[SensorEvent]) -> Result<Vec<Match>, PatternError> {
        for (i, w) in events.windows(2).enumerate() {
            if (w[1].timestamp, &w[1].event_id) < (w[0].timestamp, &w[0].event_id) {
                return Err(PatternError::UnsortedInput { index: i + 1 });
            }
        }
        let plan = &*self.plan;
        let last_term = 1u64 << (plan.terms() - 1);
        let slots: Vec<Slot> = events
            .iter()
            .filter_map(|e| {
                let mask = plan.term_mask(e);
                (mask != 0).then(|| Slot::of(e, mask))
            })
            .collect();
        let mut out: Vec<Match> = Vec::new();
        for s in slots.iter().filter(|s| s.mask & last_term != 0) {
            if let Some(m) = plan.close(&slots, s) {
                if out.last() != Some(&m) {
                    out.push(m);
                }
            }
        }
        Ok(out)
    }

    pub fn stream(&self) -> StreamMatcher {
        StreamMatcher { plan: self.plan.clone(), buffer: VecDeque::new(), last_ts: None }
    }
}

/// Incremental form of [`Matcher`]; feeding events one by one yields the
/// same matches as the batch matcher on the same sequence.
#[derive(Debug, Clone)]
pub struct StreamMatcher {
    plan: Arc<Plan>,
    buffer: VecDeque<Slot>,
    last_ts: Option<Millis>,
}

impl StreamMatcher {
    pub fn pattern_text(&self) -> &str {
        &self.plan.pattern_text
    }

    /// Number of events currently retained.
    pub fn retained(&self) -> usize {
        self.buffer.len()
    }

    pub fn last_timestamp(&self) -> Option<Millis> {
        self.last_ts
    }

    /// Feeds one event. Timestamps must be nondecreasing.
    pub fn push(&mut self, e: &SensorEvent) -> Result<Option<Match>, PatternError> {
        if let Some(last) = self.last_ts {
            if e.timestamp < last {
                return Err(PatternError::OutOfOrderEvent {
                    event_id: e.event_id.clone(),
                    timestamp: e.timestamp,
                    last,
                });
            }
        }
        self.last_ts = Some(e.timestamp);
        let plan = &*self.plan;
        let Some(window) = plan.window else {
            // A lone term needs no history.
            return Ok((plan.term_mask(e) != 0).then(|| Match {
                event_ids: vec![e.event_id.clone()],
                start: e.timestamp,
                end: e.timestamp,
                pattern_text: plan.pattern_text.clone(),
                camera_id: e.camera_id.clone(),
            }));
        };
        let horizon = e.timestamp.saturating_sub(window);
        while self.buffer.front().is_some_and(|s| s.ts < horizon) {
            self.buffer.pop_front();
        }

        let mask = plan.term_mask(e);
        if mask == 0 {
            return Ok(None);
        }
        let slot = Slot::of(e, mask);
        let last_term = 1u64 << (plan.terms() - 1);
        let found = if mask & last_term != 0 { plan.close(&self.buffer, &slot) } else { None };

        // The closing term never serves as a predecessor.
        if mask & !last_term != 0 {
            let key = (slot.ts, slot.event_id.clone());
            let mut at = self.buffer.len();
            while at > 0 && (self.buffer[at - 1].ts, self.buffer[at - 1].event_id.clone()) > key {
                at -= 1;
            }
            self.buffer.insert(at, slot);
        }
        Ok(found)
    }
}
