//! Acceptance suite. One line per criterion:
//!
//! ```text
//! PASS attention_budget              0.41s  1000 snapshots, 17 tie groups checked
//! ```
//!
//! Runs without the test harness so that the verdict lines land in the
//! normal `cargo test` output; exits non-zero when any criterion fails.
//! `FUSION_THROUGHPUT_SECS` shortens the throughput run for local
//! iteration (the criterion itself needs the default 60).

#[path = "../../core/tests/support/pattern_oracle.rs"]
mod pattern_oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use fusion_core::event::{BBox, CameraMeta, OperatorAnnotation, Scalar, SensorEvent, Source};
use fusion_core::learning::{ContextKey, SeverityModel, DEFAULT_WINDOW_LENGTH, SEVERITY_LEVELS};
use fusion_core::ontology::{ConceptId, Ontology};
use fusion_core::pattern::Matcher;
use fusion_core::retex::{
    apply_feedback, rank_cameras, CameraRisk, CameraSnapshot, Components, Feedback, Outcome, Recommendation,
    RetexEngine, RiskWeights,
};
use fusion_core::store::{EventStore, RetentionPolicy};
use fusion_server::config::parse_pattern_file;
use fusion_server::pipeline::{
    Pipeline, Settings, BASELINE_SNAPSHOT, BOARD_FILE, RETEX_SNAPSHOT, SEVERITY_SNAPSHOT,
};
use fusion_server::protocol::{
    Ack, AddPattern, Alert, BoardCamera, BoardUpdate, ErrorReply, Message, Payload, Rating, Role, Subscribe,
};
use fusion_server::simulate::{simulate, BaseRate, Injection, ScenarioScript, DEFAULT_START};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DAY: i64 = 86_400_000;

type Checked = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config")
}

// ---------------------------------------------------------------------------
// Attention budget

fn attention_budget() -> Checked {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB0D6E7);
    let mut tie_groups = 0usize;
    for round in 0..1000 {
        let n = rng.gen_range(5..=200);
        let operators = rng.gen_range(1..=4u32);
        // Coarse components on some rounds so equal risks actually occur.
        let coarse = rng.gen_bool(0.4);
        let comp = |rng: &mut ChaCha8Rng| if coarse { rng.gen_range(0..=2) as f64 / 2.0 } else { rng.gen() };
        let snapshot: Vec<CameraSnapshot> = (0..n)
            .map(|i| CameraSnapshot {
                camera_id: format!("cam{:03}", (i * 7919) % 1000),
                components: Components::new(comp(&mut rng), comp(&mut rng), comp(&mut rng), comp(&mut rng)),
            })
            .collect();
        let w = if rng.gen_bool(0.3) {
            RiskWeights::default()
        } else {
            RiskWeights::normalized([rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0)])
                .unwrap()
        };
        let ranking = rank_cameras(&snapshot, &w, operators).map_err(|e| e.to_string())?;
        let cap = 16 * operators as usize;
        check(ranking.cameras.len() <= cap && ranking.cameras.len() == n.min(cap), || {
            format!("round {round}: {} cameras for {operators} operators", ranking.cameras.len())
        })?;

        // Independent ordering: weighted sum, then camera id.
        let wa = w.to_array();
        let mut expected: Vec<(f64, &str)> = snapshot
            .iter()
            .map(|c| {
                let x = c.components.to_array();
                (wa[0] * x[0] + wa[1] * x[1] + wa[2] * x[2] + wa[3] * x[3], c.camera_id.as_str())
            })
            .collect();
        expected.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        let got: Vec<&str> = ranking.cameras.iter().map(|c| c.camera_id.as_str()).collect();
        let want: Vec<&str> = expected.iter().take(cap).map(|e| e.1).collect();
        check(got == want, || format!("round {round}: order differs from weighted-sum order"))?;
        for pair in ranking.cameras.windows(2) {
            check(pair[0].risk >= pair[1].risk, || format!("round {round}: risk increases"))?;
            if pair[0].risk == pair[1].risk {
                tie_groups += 1;
                check(pair[0].camera_id < pair[1].camera_id, || format!("round {round}: tie not broken by id"))?;
            }
        }
        check(ranking.cameras.iter().enumerate().all(|(i, c)| c.rank == i as u32 + 1), || {
            format!("round {round}: ranks not 1..n")
        })?;

        // Input order must not matter.
        let mut shuffled = snapshot.clone();
        shuffled.shuffle(&mut rng);
        check(rank_cameras(&shuffled, &w, operators).unwrap() == ranking, || {
            format!("round {round}: ranking depends on input order")
        })?;
    }
    check(tie_groups > 0, || "no ties exercised".into())?;
    Ok(format!("1000 snapshots, {tie_groups} tied pairs ordered by id"))
}

// ---------------------------------------------------------------------------
// Pattern matcher against exhaustive search

fn pattern_oracle_equivalence() -> Checked {
    let o = Ontology::seed();
    let mut matches = 0;
    let mut prefixes = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ast = pattern_oracle::random_pattern(&mut rng, &o);
        let n = rng.gen_range(20..=200);
        let events = pattern_oracle::random_events(&mut rng, &o, n);
        let matcher = Matcher::new(&ast, &o).map_err(|e| e.to_string())?;
        let batch = matcher.match_events(&events).map_err(|e| e.to_string())?;
        let got: Vec<Vec<String>> = batch.iter().map(|m| m.event_ids.clone()).collect();
        check(got == pattern_oracle::oracle(&ast, &o, &events), || format!("seed {seed}: batch differs from oracle for {ast}"))?;
        matches += batch.len();

        let mut stream = matcher.stream();
        let mut streamed = Vec::new();
        for k in 0..events.len() {
            streamed.extend(stream.push(&events[k]).map_err(|e| e.to_string())?);
            let prefix = matcher.match_events(&events[..=k]).map_err(|e| e.to_string())?;
            check(streamed == prefix, || format!("seed {seed}: streaming differs from batch at prefix {k}"))?;
            prefixes += 1;
        }
    }
    check(matches > 0, || "no matches at all".into())?;
    Ok(format!("100 seeds, {matches} matches, {prefixes} prefixes"))
}

// ---------------------------------------------------------------------------
// Anomaly detection on a planted burst

fn anomaly_detection() -> Checked {
    let o = Arc::new(Ontology::seed());
    let w = DEFAULT_WINDOW_LENGTH;
    let cameras: Vec<CameraMeta> = (0..20).map(|i| CameraMeta::new(format!("cam{i:02}"), "zone")).collect();
    let rate = |c: &str, r: f64| BaseRate { concept: ConceptId::new(c).unwrap(), hour: None, camera_id: None, rate: r };
    let mut hits = 0;
    let mut misses = Vec::new();
    for seed in 0..100u64 {
        let target = format!("cam{:02}", seed % 20);
        let script = ScenarioScript {
            seed,
            start: DEFAULT_START,
            duration_ms: 51 * w,
            window_length_ms: w,
            cameras: cameras.clone(),
            base_rates: vec![rate("crowd", 3.0), rate("line_crossing", 2.0), rate("counter_flow", 1.0), rate("theft", 0.3)],
            injections: vec![Injection {
                offset_ms: 50 * w + 60_000,
                camera_id: target.clone(),
                concepts: vec![ConceptId::new("smuggling").unwrap(); 10],
                spacing_ms: 30_000,
                confidence: 0.95,
            }],
        };
        let events = simulate(&script, &o).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut p = Pipeline::open(dir.path(), o.clone(), Settings::default()).map_err(|e| format!("{e:#}"))?;
        for e in events {
            if let Some(r) = p.handle(Payload::SensorEvent(e)).reply {
                return Err(format!("seed {seed}: event rejected: {} {}", r.code, r.detail));
            }
        }
        let now = DEFAULT_START + 51 * w - 1;
        let snap = p.camera_snapshot(now);
        let top = snap.iter().find(|c| c.camera_id == target).map(|c| c.components.anomaly).unwrap_or(0.0);
        let strictly = snap.iter().filter(|c| c.camera_id != target).all(|c| c.components.anomaly < top);
        if strictly {
            hits += 1;
        } else {
            misses.push(seed);
        }
    }
    check(hits >= 95, || format!("burst camera strictly highest in {hits}/100 seeds (misses {misses:?})"))?;
    Ok(format!("burst camera strictly highest in {hits}/100 seeds"))
}

// ---------------------------------------------------------------------------
// Severity model against a planted function

fn severity_consistency() -> Checked {
    let o = Ontology::seed();
    let concepts: Vec<ConceptId> = o.ids().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5E7E);
    let mut keys = BTreeSet::new();
    while keys.len() < 50 {
        keys.insert(ContextKey::new(
            format!("cam{}", rng.gen_range(0..8)),
            rng.gen_range(0..24),
            concepts.choose(&mut rng).unwrap().clone(),
        ));
    }
    let planted = |k: &ContextKey| -> u8 {
        let cam: u32 = k.camera_id[3..].parse().unwrap();
        let c = k.concept.as_str().bytes().map(u32::from).sum::<u32>();
        ((cam * 7 + k.hour_bucket as u32 * 3 + c) % SEVERITY_LEVELS as u32) as u8
    };
    // Each sample reports the planted rating 60% of the time, otherwise a
    // uniformly random level.
    let mut samples = Vec::new();
    for k in &keys {
        for _ in 0..30 {
            let r = if rng.gen_bool(0.6) { planted(k) } else { rng.gen_range(0..SEVERITY_LEVELS as u8) };
            samples.push((k.clone(), r));
        }
    }
    samples.shuffle(&mut rng);
    let mut model = SeverityModel::new(1.0);
    for (k, r) in &samples {
        model.update(k, *r).map_err(|e| e.to_string())?;
    }
    let agree = keys.iter().filter(|k| model.predict(k).argmax() == planted(k)).count();

    let mut probes: Vec<ContextKey> = keys.iter().cloned().collect();
    for _ in 0..200 {
        probes.push(ContextKey::new(format!("cam{}", rng.gen_range(0..12)), rng.gen_range(0..24), concepts.choose(&mut rng).unwrap().clone()));
    }
    let mut worst: f64 = 0.0;
    for k in &probes {
        let p = model.predict(k);
        worst = worst.max((p.distribution.iter().sum::<f64>() - 1.0).abs());
        check(p.distribution.iter().all(|&x| x > 0.0), || format!("non-positive probability for {k:?}"))?;
    }
    worst = worst.max((model.prior().distribution.iter().sum::<f64>() - 1.0).abs());
    check(agree * 100 >= 95 * keys.len(), || format!("argmax agrees on {agree}/50 keys"))?;
    check(worst <= 1e-9, || format!("distribution sums off by {worst:e}"))?;
    Ok(format!("argmax agrees on {agree}/50 keys, max |sum-1| = {worst:.1e} over {} predictions", probes.len() + 1))
}

// ---------------------------------------------------------------------------
// Weight learning from simulated operators

fn random_snapshot(rng: &mut ChaCha8Rng, n: usize) -> Vec<CameraSnapshot> {
    (0..n)
        .map(|i| CameraSnapshot {
            camera_id: format!("cam{i:02}"),
            components: Components::new(rng.gen(), rng.gen(), rng.gen(), rng.gen()),
        })
        .collect()
}

fn retex_learning() -> Checked {
    let mut wins = 0;
    let mut margins = Vec::new();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + seed);
        let mut engine = RetexEngine::new(0.1, 1).map_err(|e| e.to_string())?;
        for round in 0..200 {
            let rec = engine.issue(&random_snapshot(&mut rng, 24), round).map_err(|e| e.to_string())?;
            let cam = rec.cameras.choose(&mut rng).unwrap();
            let outcome = if cam.components.pattern > 0.5 { Outcome::Accept } else { Outcome::Dismiss };
            engine
                .feedback(&Feedback {
                    recommendation_id: rec.recommendation_id.clone(),
                    camera_id: cam.camera_id.clone(),
                    outcome,
                    operator_id: "op1".into(),
                    timestamp: round,
                })
                .map_err(|e| e.to_string())?;
        }
        let w = engine.weights();
        let others = w.w_anomaly.max(w.w_severity).max(w.w_recency);
        if w.w_pattern > others {
            wins += 1;
        }
        margins.push(w.w_pattern - others);
    }

    let mut worst: f64 = 0.0;
    for (k, eta) in [0.1, 1.0, 5.0].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(77 + k as u64);
        let mut engine = RetexEngine::new(eta, 2).map_err(|e| e.to_string())?;
        let mut rec = engine.issue(&random_snapshot(&mut rng, 40), 0).map_err(|e| e.to_string())?;
        for i in 0..10_000 {
            if i % 50 == 0 {
                rec = engine.issue(&random_snapshot(&mut rng, 40), i).map_err(|e| e.to_string())?;
            }
            let cam = rec.cameras.choose(&mut rng).unwrap();
            let outcome = if rng.gen_bool(0.5) { Outcome::Accept } else { Outcome::Dismiss };
            let fb = Feedback {
                recommendation_id: rec.recommendation_id.clone(),
                camera_id: cam.camera_id.clone(),
                outcome,
                operator_id: String::new(),
                timestamp: i,
            };
            let w = engine.feedback(&fb).map_err(|e| e.to_string())?.to_array();
            check(w.iter().all(|&x| x > 0.0 && x.is_finite()), || format!("eta {eta}: weight not positive at step {i}: {w:?}"))?;
            worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    check(wins >= 48, || format!("w_pattern largest in {wins}/50 seeds"))?;
    check(worst <= 1e-9, || format!("weights sum off by {worst:e}"))?;
    Ok(format!("w_pattern largest in {wins}/50 seeds (min margin {min_margin:.3}); 30000 random feedbacks, max |sum-1| = {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// Single update, against hand arithmetic

fn one_camera_rec(c: Components) -> Recommendation {
    Recommendation {
        recommendation_id: "rec-1".into(),
        issued_at: 0,
        cameras: vec![CameraRisk { camera_id: "cam1".into(), components: c, risk: 0.0, rank: 1 }],
        budget: 16,
        weights: RiskWeights::default(),
    }
}

fn fb(outcome: Outcome) -> Feedback {
    Feedback { recommendation_id: "rec-1".into(), camera_id: "cam1".into(), outcome, operator_id: String::new(), timestamp: 0 }
}

fn apply_feedback_numeric() -> Checked {
    let uniform = RiskWeights::default();
    let rec = one_camera_rec(Components::new(1.0, 0.0, 0.0, 0.0));
    let w = apply_feedback(&uniform, &rec, &fb(Outcome::Accept), 0.1).map_err(|e| e.to_string())?;
    // 0.25 e^0.1 / (0.25 e^0.1 + 0.75) with e^0.1 = 1.1051709180756477.
    let e = 1.105_170_918_075_647_7_f64;
    let hand = 0.25 * e / (0.25 * e + 0.75);
    let rest = 0.25 / (0.25 * e + 0.75);
    check((w.w_anomaly - 0.2692).abs() <= 5e-4, || format!("w_anomaly = {}", w.w_anomaly))?;
    check((w.w_anomaly - hand).abs() <= 1e-12, || format!("w_anomaly {} vs hand {hand}", w.w_anomaly))?;
    check([w.w_severity, w.w_pattern, w.w_recency].iter().all(|x| (x - rest).abs() <= 1e-12 && (x - 0.2436).abs() <= 5e-4), || {
        format!("other weights {w:?}")
    })?;

    let zero = one_camera_rec(Components::new(0.0, 0.0, 0.0, 0.0));
    let same = apply_feedback(&uniform, &zero, &fb(Outcome::Accept), 0.1).unwrap();
    check(same == uniform, || format!("zero components moved weights: {same:?}"))?;

    let start = RiskWeights::normalized([0.1, 0.2, 0.3, 0.4]).unwrap();
    let mixed = one_camera_rec(Components::new(0.9, 0.1, 0.5, 0.3));
    let there = apply_feedback(&start, &mixed, &fb(Outcome::Dismiss), 0.1).unwrap();
    let back = apply_feedback(&there, &mixed, &fb(Outcome::Accept), 0.1).unwrap();
    let drift = start.to_array().iter().zip(back.to_array()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(drift <= 1e-9, || format!("dismiss then accept drifted {drift:e}"))?;
    Ok(format!("w_anomaly = {:.6} (hand {hand:.6}), others {rest:.6}, round trip drift {drift:.1e}", w.w_anomaly))
}

// ---------------------------------------------------------------------------
// Retention

fn retention() -> Checked {
    let o = Arc::new(Ontology::seed());
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let now = DEFAULT_START + 400 * DAY;
    let policy = RetentionPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x4E7);
    let mut originals = Vec::new();
    {
        let mut store = EventStore::open(dir.path(), o.clone()).map_err(|e| e.to_string())?;
        for i in 0..120 {
            // Ages spread over [0, 400) days, including both boundaries.
            let age = match i {
                0 => policy.video_retention,
                1 => policy.video_retention + 1,
                2 => policy.metadata_retention,
                3 => policy.metadata_retention + 1,
                _ => rng.gen_range(0..400 * DAY),
            };
            let mut e = SensorEvent::new(format!("ev-{i:03}"), format!("cam{}", i % 6), now - age, ConceptId::new("crowd").unwrap(), 0.8)
                .with_video_ref(format!("nvr://cam{}/{i}", i % 6))
                .with_attribute("zone", Scalar::Text("hall".into()));
            e.bbox = Some(BBox { x: 0.1, y: 0.2, w: 0.3, h: 0.4 });
            store.append_event(e.clone()).map_err(|e| e.to_string())?;
            originals.push(e);
        }
    }
    let mut store = EventStore::open(dir.path(), o.clone()).map_err(|e| e.to_string())?;
    let report = store.retention_sweep(now, policy).map_err(|e| e.to_string())?;
    let again = store.retention_sweep(now, policy).map_err(|e| e.to_string())?;

    let stored: BTreeMap<String, SensorEvent> = store
        .query(i64::MIN, i64::MAX, None, None)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|e| (e.event_id.clone(), e))
        .collect();
    let (mut kept, mut stripped, mut deleted) = (0, 0, 0);
    for e in &originals {
        let age = now - e.timestamp;
        let got = stored.get(&e.event_id);
        if age > policy.metadata_retention {
            check(got.is_none(), || format!("{} is {age} ms old but still stored", e.event_id))?;
            deleted += 1;
        } else if age > policy.video_retention {
            let mut want = e.clone();
            want.video_ref = None;
            check(got == Some(&want), || format!("{}: expected stripped copy, got {got:?}", e.event_id))?;
            stripped += 1;
        } else {
            check(got == Some(e), || format!("{}: young event changed", e.event_id))?;
            kept += 1;
        }
    }
    check(report.events_stripped == stripped && report.records_deleted == deleted, || format!("report {report:?}"))?;
    check(again.events_stripped == 0 && again.records_deleted == 0, || format!("rerun reported {again:?}"))?;
    drop(store);
    let reopened = EventStore::open(dir.path(), o).map_err(|e| e.to_string())?;
    check(reopened.query(i64::MIN, i64::MAX, None, None).unwrap().len() == kept + stripped, || "reopen lost events".into())?;
    Ok(format!("{kept} kept, {stripped} stripped of video_ref, {deleted} deleted; rerun (0,0)"))
}

// ---------------------------------------------------------------------------
// Wire and store round trips

fn text(rng: &mut ChaCha8Rng) -> String {
    const POOL: &[char] = &['a', 'Z', '0', ' ', '"', '\\', '/', '\n', '\r', '\t', '\u{0}', '\u{1f}', 'é', '€', '𝄞', '🚨', '{', '}', ','];
    let n = rng.gen_range(0..12);
    (0..n).map(|_| *POOL.choose(rng).unwrap()).collect()
}

fn ident(rng: &mut ChaCha8Rng) -> String {
    format!("id-{}", rng.gen::<u32>())
}

fn float(rng: &mut ChaCha8Rng) -> f64 {
    match rng.gen_range(0..5) {
        0 => rng.gen(),
        1 => rng.gen_range(-1e6..1e6),
        2 => rng.gen::<f64>() * 10f64.powi(rng.gen_range(-300..300)),
        3 => rng.gen_range(0..100) as f64,
        _ => f64::MIN_POSITIVE * rng.gen_range(1.0..2.0),
    }
}

fn components(rng: &mut ChaCha8Rng) -> Components {
    Components::new(rng.gen(), rng.gen(), rng.gen(), rng.gen())
}

fn random_payload(rng: &mut ChaCha8Rng, kind: usize, concepts: &[ConceptId]) -> Payload {
    let concept = concepts.choose(rng).unwrap().clone();
    match kind {
        0 => {
            let mut e = SensorEvent::new(ident(rng), text(rng), rng.gen(), concept, float(rng));
            e.source = if rng.gen() { Source::Human } else { Source::Machine };
            if rng.gen() {
                e.bbox = Some(BBox { x: float(rng), y: float(rng), w: float(rng), h: float(rng) });
            }
            if rng.gen() {
                e.video_ref = Some(text(rng));
            }
            for _ in 0..rng.gen_range(0..4) {
                let v = match rng.gen_range(0..3) {
                    0 => Scalar::Flag(rng.gen()),
                    1 => Scalar::Number(float(rng)),
                    _ => Scalar::Text(text(rng)),
                };
                e.attributes.insert(text(rng), v);
            }
            Payload::SensorEvent(e)
        }
        1 => Payload::Annotation(OperatorAnnotation {
            annotation_id: ident(rng),
            operator_id: text(rng),
            camera_id: text(rng),
            timestamp: rng.gen(),
            concept,
            free_text: text(rng),
            severity: rng.gen_range(0..5),
        }),
        2 => Payload::Rating(Rating { camera_id: text(rng), hour_bucket: rng.gen_range(0..24), concept, rating: rng.gen_range(0..5) }),
        3 => Payload::Feedback(Feedback {
            recommendation_id: ident(rng),
            camera_id: text(rng),
            outcome: if rng.gen() { Outcome::Accept } else { Outcome::Dismiss },
            operator_id: text(rng),
            timestamp: rng.gen(),
        }),
        4 => Payload::AddPattern(AddPattern { name: text(rng), pattern_text: text(rng) }),
        5 => Payload::Subscribe(Subscribe { role: if rng.gen() { Role::Console } else { Role::Sensor } }),
        6 => Payload::BoardUpdate(BoardUpdate {
            recommendation_id: ident(rng),
            issued_at: rng.gen(),
            budget: rng.gen_range(16..=64),
            cameras: (0..rng.gen_range(0..=16))
                .map(|i| BoardCamera {
                    camera_id: text(rng),
                    risk: rng.gen(),
                    components: components(rng),
                    rank: i + 1,
                    explain_text: text(rng),
                })
                .collect(),
        }),
        7 => Payload::Alert(Alert {
            pattern: text(rng),
            event_ids: (0..rng.gen_range(1..5)).map(|_| text(rng)).collect(),
            camera_id: text(rng),
            start: rng.gen(),
            end: rng.gen(),
        }),
        8 => Payload::Ack(Ack { seq: rng.gen() }),
        _ => Payload::Error(ErrorReply { seq: rng.gen(), code: text(rng), detail: text(rng) }),
    }
}

fn round_trips() -> Checked {
    let o = Ontology::seed();
    let concepts: Vec<ConceptId> = o.ids().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x3133);
    let mut kinds = BTreeSet::new();
    for case in 0..1000 {
        let payload = random_payload(&mut rng, case % 10, &concepts);
        kinds.insert(payload.kind());
        let msg = Message::new(rng.gen(), payload);
        let line = msg.to_line();
        check(!line.contains('\n'), || format!("case {case}: line contains a newline"))?;
        let back = Message::parse(&line).map_err(|e| format!("case {case}: {e} in {line}"))?;
        check(back == msg, || format!("case {case}: round trip changed {line}"))?;
        check(back.to_line() == line, || format!("case {case}: reserialization differs"))?;
    }
    check(kinds.len() == 10, || format!("only kinds {kinds:?}"))?;

    // Store: cut the last record of one segment at every byte offset.
    let o = Arc::new(o);
    let golden = tempfile::tempdir().map_err(|e| e.to_string())?;
    let events: Vec<SensorEvent> = (0..8)
        .map(|i| {
            let Payload::SensorEvent(mut e) = random_payload(&mut rng, 0, &concepts) else { unreachable!() };
            e.event_id = format!("ev-{i}");
            e.camera_id = format!("cam{i}");
            e.timestamp = DEFAULT_START + i * 1000;
            e.confidence = 0.5;
            e.bbox = Some(BBox { x: 0.125, y: 0.5, w: 0.25, h: 0.375 });
            e.attributes.clear();
            e.attributes.insert("note".into(), Scalar::Text("multi\nline \"quoted\" ☃".into()));
            e
        })
        .collect();
    {
        let mut s = EventStore::open(golden.path(), o.clone()).map_err(|e| e.to_string())?;
        for e in &events {
            s.append_event(e.clone()).map_err(|e| e.to_string())?;
        }
    }
    let seg = golden.path().join("events-1.log");
    let bytes = fs::read(&seg).map_err(|e| e.to_string())?;
    let last_start = bytes[..bytes.len() - 1].iter().rposition(|&b| b == b'\n').unwrap() + 1;
    let mut cuts = 0;
    for cut in last_start..bytes.len() {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        fs::copy(golden.path().join("manifest"), dir.path().join("manifest")).map_err(|e| e.to_string())?;
        fs::write(dir.path().join("events-1.log"), &bytes[..cut]).map_err(|e| e.to_string())?;
        let s = EventStore::open(dir.path(), o.clone()).map_err(|e| format!("cut {cut}: {e}"))?;
        let got = s.query(i64::MIN, i64::MAX, None, None).unwrap();
        check(got == events[..7], || format!("cut {cut}: recovered {} records", got.len()))?;
        cuts += 1;
    }
    Ok(format!("1000 messages over 10 kinds; {cuts} truncation offsets recover 7/7 complete records"))
}

// ---------------------------------------------------------------------------
// End to end through the binary

fn run_pipeline(bin: &str, script: &Path, config: &Path) -> Result<String, String> {
    let mut sim = Command::new(bin)
        .args(["simulate", "--seed", "42", "--script"])
        .arg(script)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let serve = Command::new(bin)
        .args(["serve", "--stdin", "--config"])
        .arg(config)
        .stdin(sim.stdout.take().unwrap())
        .stderr(Stdio::null())
        .output()
        .map_err(|e| e.to_string())?;
    let sim_status = sim.wait().map_err(|e| e.to_string())?;
    check(sim_status.success() && serve.status.success(), || format!("simulate {sim_status}, serve {}", serve.status))?;
    String::from_utf8(serve.stdout).map_err(|e| e.to_string())
}

fn end_to_end_determinism() -> Checked {
    let bin = env!("CARGO_BIN_EXE_fusion");
    let samples = config_dir();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = dir.path().join("fusion.toml");
        let patterns = samples.join("patterns.conf");
        fs::write(&cfg, format!("data_dir = \"data\"\npattern_file = {:?}\n", patterns.display().to_string())).map_err(|e| e.to_string())?;
        let out = run_pipeline(bin, &samples.join("scenario.toml"), &cfg)?;
        let mut files = BTreeMap::new();
        for f in [BASELINE_SNAPSHOT, SEVERITY_SNAPSHOT, RETEX_SNAPSHOT, BOARD_FILE] {
            files.insert(f, fs::read(dir.path().join("data").join(f)).map_err(|e| format!("{f}: {e}"))?);
        }
        runs.push((out, files, dir));
    }
    let (a, b) = (&runs[0], &runs[1]);
    for (f, bytes) in &a.1 {
        check(b.1[f] == *bytes, || format!("{f} differs between runs"))?;
    }
    check(a.0 == b.0, || "pushed output differs between runs".into())?;
    let alerts = a.0.lines().filter(|l| l.contains("\"kind\":\"alert\"")).count();
    let boards = a.0.lines().filter(|l| l.contains("\"kind\":\"board_update\"")).count();
    check(boards > 0 && alerts > 0, || format!("{boards} boards, {alerts} alerts"))?;
    let board: BoardUpdate = serde_json::from_slice(&a.1[BOARD_FILE]).map_err(|e| e.to_string())?;
    Ok(format!("4 snapshot files identical; {boards} boards and {alerts} alerts identical; final board {}", board.recommendation_id))
}

// ---------------------------------------------------------------------------
// Throughput

fn throughput() -> Checked {
    const RATE: usize = 10_000;
    let secs: usize = std::env::var("FUSION_THROUGHPUT_SECS").ok().and_then(|s| s.parse().ok()).unwrap_or(60);
    let o = Arc::new(Ontology::seed());
    let concepts: Vec<ConceptId> = o.ids().cloned().collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut p = Pipeline::open(dir.path(), o, Settings::default()).map_err(|e| format!("{e:#}"))?;
    let text = fs::read_to_string(config_dir().join("patterns.conf")).map_err(|e| e.to_string())?;
    let patterns = parse_pattern_file(&text).map_err(|e| e.to_string())?;
    for (name, pattern_text) in &patterns {
        p.add_pattern(&AddPattern { name: name.clone(), pattern_text: pattern_text.clone() }).map_err(|r| r.detail)?;
    }
    let active = p.pattern_names().count();
    check(active == 10, || format!("{active} patterns active"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x7470);
    let start = Instant::now();
    let mut worst = Duration::ZERO;
    let mut busy = Duration::ZERO;
    let mut max_lag = Duration::ZERO;
    let mut seq = 0u64;
    for s in 0..secs {
        // The sensor side prepares one second of traffic: event time moves
        // in step with the schedule, 0.1 ms per event.
        let lines: Vec<String> = (0..RATE)
            .map(|_| {
                seq += 1;
                let ts = DEFAULT_START + (seq as i64) / 10;
                let e = SensorEvent::new(
                    format!("ev-{seq:09}"),
                    format!("cam{:02}", rng.gen_range(0..64)),
                    ts,
                    concepts.choose(&mut rng).unwrap().clone(),
                    rng.gen_range(0.3..1.0),
                );
                Message::new(seq, Payload::SensorEvent(e)).to_line()
            })
            .collect();
        let slot = start + Duration::from_secs(s as u64);
        if let Some(wait) = slot.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        let t = Instant::now();
        for line in &lines {
            let msg = Message::parse(line).map_err(|e| e.to_string())?;
            if let Some(r) = p.handle(msg.payload).reply {
                return Err(format!("rejected: {} {}", r.code, r.detail));
            }
        }
        let took = t.elapsed();
        busy += took;
        worst = worst.max(took);
        max_lag = max_lag.max(Instant::now().saturating_duration_since(slot + Duration::from_secs(1)));
    }
    let total = start.elapsed();
    let stats = p.stats();
    let rate = (stats.events as f64) / busy.as_secs_f64();
    check(stats.events as usize == RATE * secs, || format!("{} events stored", stats.events))?;
    check(max_lag <= Duration::from_millis(100), || {
        format!("fell behind schedule by {max_lag:?}; slowest second took {worst:?} ({rate:.0} events/s)")
    })?;
    Ok(format!(
        "{} events in {:.1}s wall, {secs} one-second slots each met (slowest {:.0} ms), {rate:.0} events/s when busy, {} alerts",
        stats.events,
        total.as_secs_f64(),
        worst.as_secs_f64() * 1000.0,
        stats.alerts
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, Option<u64>, fn() -> Checked); 10] = [
        ("attention_budget", Some(10), attention_budget),
        ("pattern_oracle_equivalence", Some(60), pattern_oracle_equivalence),
        ("anomaly_detection", Some(60), anomaly_detection),
        ("severity_consistency", Some(10), severity_consistency),
        ("retex_learning", Some(30), retex_learning),
        ("apply_feedback_numeric", None, apply_feedback_numeric),
        ("retention", None, retention),
        ("wire_and_store_round_trips", None, round_trips),
        ("end_to_end_determinism", None, end_to_end_determinism),
        ("throughput_10k_per_second", None, throughput),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, limit, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let t = Instant::now();
        let result = match panic::catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let elapsed = t.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(l)) if elapsed > Duration::from_secs(l) => Err(format!("took {elapsed:.1?}, limit {l}s")),
            (r, _) => r,
        };
        let (verdict, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{verdict} {name:<28} {:>7.2}s  {detail}", elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
