//! Exhaustive reference for pattern matching and random inputs for it.
//!
//! For every event that can close the pattern, all index tuples are
//! enumerated, filtered against the pattern definition, and the one whose
//! indices are largest compared from the second-to-last term backward is
//! kept.

use fusion_core::event::SensorEvent;
use fusion_core::ontology::{ConceptId, Ontology};
use fusion_core::pattern::{PatternAst, Scope};
use rand::seq::SliceRandom;
use rand::Rng;

pub const CAMERAS: [&str; 3] = ["cam_a", "cam_b", "cam_c"];

fn flat_terms(ast: &PatternAst, out: &mut Vec<(ConceptId, f64)>) {
    match ast {
        PatternAst::Term { concept, min_confidence } => out.push((concept.clone(), *min_confidence)),
        PatternAst::Seq { children, .. } => children.iter().for_each(|c| flat_terms(c, out)),
    }
}

/// Checks `events` (one per term, in term order) against the nested
/// window and camera constraints. Returns the number of terms consumed.
fn satisfies(ast: &PatternAst, o: &Ontology, events: &[&SensorEvent]) -> Option<usize> {
    match ast {
        PatternAst::Term { concept, min_confidence } => {
            let e = events[0];
            (o.is_a(e.concept.as_str(), concept.as_str()) && e.confidence >= *min_confidence).then_some(1)
        }
        PatternAst::Seq { children, within, scope } => {
            let mut used = 0;
            for c in children {
                used += satisfies(c, o, &events[used..])?;
            }
            let part = &events[..used];
            let span = part[used - 1].timestamp - part[0].timestamp;
            let same = part.iter().all(|e| e.camera_id == part[0].camera_id);
            (span <= *within && (*scope == Scope::AnyCamera || same)).then_some(used)
        }
    }
}

/// Per closing event, in input order, the event ids of the chosen match.
pub fn oracle(ast: &PatternAst, o: &Ontology, events: &[SensorEvent]) -> Vec<Vec<String>> {
    let mut terms = Vec::new();
    flat_terms(ast, &mut terms);
    let n = terms.len();
    let horizon = match ast {
        PatternAst::Seq { within, .. } => *within,
        PatternAst::Term { .. } => 0,
    };
    let mut out = Vec::new();
    for j in 0..events.len() {
        let close = &events[j];
        let (c, min) = &terms[n - 1];
        if !(o.is_a(close.concept.as_str(), c.as_str()) && close.confidence >= *min) {
            continue;
        }
        // Every valid match lies inside the outer window.
        let pool: Vec<usize> =
            (0..j).filter(|&i| events[i].timestamp >= close.timestamp - horizon).collect();
        let mut best: Option<Vec<usize>> = None;
        let mut tuple = Vec::with_capacity(n);
        enumerate(&pool, n - 1, 0, &mut tuple, &mut |t| {
            let mut idx = t.to_vec();
            idx.push(j);
            let chosen: Vec<&SensorEvent> = idx.iter().map(|&i| &events[i]).collect();
            if chosen.windows(2).any(|w| w[0].timestamp >= w[1].timestamp) {
                return;
            }
            if satisfies(ast, o, &chosen) != Some(n) {
                return;
            }
            let rev: Vec<usize> = idx.iter().rev().copied().collect();
            if best.as_ref().is_none_or(|b| rev > b.iter().rev().copied().collect::<Vec<_>>()) {
                best = Some(idx);
            }
        });
        if let Some(b) = best {
            out.push(b.iter().map(|&i| events[i].event_id.clone()).collect());
        }
    }
    out
}

fn enumerate(pool: &[usize], k: usize, from: usize, tuple: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    if tuple.len() == k {
        f(tuple);
        return;
    }
    for p in from..pool.len() {
        tuple.push(pool[p]);
        enumerate(pool, k, p + 1, tuple, f);
        tuple.pop();
    }
}

fn concept(rng: &mut impl Rng, o: &Ontology) -> ConceptId {
    let ids: Vec<&ConceptId> = o.ids().collect();
    (*ids.choose(rng).unwrap()).clone()
}

fn term(rng: &mut impl Rng, o: &Ontology) -> PatternAst {
    let min_confidence = *[0.0, 0.0, 0.3, 0.6].choose(rng).unwrap();
    PatternAst::Term { concept: concept(rng, o), min_confidence }
}

fn scope(rng: &mut impl Rng) -> Scope {
    if rng.gen_bool(0.3) {
        Scope::SameCamera
    } else {
        Scope::AnyCamera
    }
}

/// Sequence of depth at most 2 with 2 to 4 terms in total.
pub fn random_pattern(rng: &mut impl Rng, o: &Ontology) -> PatternAst {
    let total = rng.gen_range(2..=4);
    let mut children = Vec::new();
    let mut left = total;
    while left > 0 {
        if left >= 2 && rng.gen_bool(0.25) && !(children.is_empty() && left == total) {
            let k = rng.gen_range(2..=left.min(3));
            let inner = (0..k).map(|_| term(rng, o)).collect();
            children.push(PatternAst::Seq {
                children: inner,
                within: rng.gen_range(5..=120) * 1000,
                scope: scope(rng),
            });
            left -= k;
        } else {
            children.push(term(rng, o));
            left -= 1;
        }
    }
    PatternAst::Seq { children, within: rng.gen_range(20..=120) * 1000, scope: scope(rng) }
}

/// Events sorted by `(timestamp, event_id)`, with repeated timestamps.
pub fn random_events(rng: &mut impl Rng, o: &Ontology, n: usize) -> Vec<SensorEvent> {
    let mut ts = 1_700_000_000_000i64;
    (0..n)
        .map(|i| {
            ts += *[0, 1000, 3000, 7000, 15000].choose(rng).unwrap();
            SensorEvent::new(
                format!("e{i:04}"),
                *CAMERAS.choose(rng).unwrap(),
                ts,
                concept(rng, o),
                rng.gen_range(0.0..1.0),
            )
        })
        .collect()
}
