//! Security-event concept hierarchy.
//!
//! An [`Ontology`] is an immutable DAG of [`Concept`]s rooted at
//! `security_event`. It is the vocabulary shared by labelers, operators and
//! patterns, and carries one description template per concept.
//!
//! # File format
//!
//! ```text
//! # comment
//! concept security_event | label="security event"
//! concept theft : security_event | label="theft" | template="{label} on {camera}"
//! concept abandoned_object : security_event | template="{label} in {zone}"
//! attr zone:text
//! ```
//!
//! `attr` lines attach to the closest preceding `concept` line.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::SensorEvent;

pub const ROOT_ID: &str = "security_event";
pub const DEFAULT_TEMPLATE: &str = "{label} detected by camera {camera} (confidence {confidence})";
/// Placeholders every template may use regardless of declared attributes.
pub const FIXED_PLACEHOLDERS: [&str; 4] = ["camera", "confidence", "time", "label"];

const MAX_SUGGESTIONS: usize = 3;
const MAX_SUGGESTION_DISTANCE: usize = 2;

static SEED: &str = include_str!("../assets/seed.ont");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OntologyError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: duplicate concept id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("concept `{id}` names unknown parent `{parent}`")]
    DanglingParent { id: String, parent: String },
    #[error("parent links of `{id}` form a cycle")]
    CycleDetected { id: String },
    #[error("root concept `security_event` is not declared")]
    MissingRoot,
    #[error("root concept `security_event` must not have parents")]
    RootHasParents,
    #[error("concept `{id}` has no parents but is not the root")]
    MultipleRoots { id: String },
    #[error("template of `{id}`: {message}")]
    InvalidTemplate { id: String, message: String },
    #[error("unknown concept `{term}`{}", format_suggestions(.suggestions))]
    UnknownConcept { term: String, suggestions: Vec<ConceptId> },
    #[error("template of `{concept}` references attribute `{attribute}` missing from the event")]
    MissingAttribute { concept: String, attribute: String },
}

fn format_suggestions(s: &[ConceptId]) -> String {
    if s.is_empty() {
        String::new()
    } else {
        let ids: Vec<&str> = s.iter().map(ConceptId::as_str).collect();
        format!(" (did you mean: {})", ids.join(", "))
    }
}

/// Lowercase snake_case identifier of a concept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ConceptId(String);

impl ConceptId {
    pub fn new(id: impl Into<String>) -> Result<Self, String> {
        let id = id.into();
        if is_identifier(&id) {
            Ok(Self(id))
        } else {
            Err(format!("`{id}` is not a valid concept id ([a-z0-9_]+)"))
        }
    }

    pub fn root() -> Self {
        Self(ROOT_ID.to_owned())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ConceptId {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        Self::new(s)
    }
}

impl From<ConceptId> for String {
    fn from(c: ConceptId) -> String {
        c.0
    }
}

impl FromStr for ConceptId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::new(s)
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::borrow::Borrow<str> for ConceptId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrKind {
    Text,
    Number,
    Flag,
}

impl AttrKind {
    fn as_str(self) -> &'static str {
        match self {
            AttrKind::Text => "text",
            AttrKind::Number => "number",
            AttrKind::Flag => "flag",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub id: ConceptId,
    pub label: String,
    pub parents: Vec<ConceptId>,
    pub template: String,
    pub attributes: Vec<(String, AttrKind)>,
}

/// Validated concept DAG. Immutable once loaded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ontology {
    concepts: BTreeMap<ConceptId, Concept>,
    /// Reflexive-transitive ancestor sets.
    ancestors: BTreeMap<ConceptId, BTreeSet<ConceptId>>,
}

impl Ontology {
    /// Parses and validates ontology file content.
    pub fn load(source: &str) -> Result<Self, OntologyError> {
        let concepts = parse_file(source)?;
        Self::from_concepts(concepts)
    }

    /// The bundled 12-concept seed ontology.
    pub fn seed() -> Self {
        Self::load(SEED).expect("bundled seed ontology is valid")
    }

    pub fn seed_source() -> &'static str {
        SEED
    }

    fn from_concepts(list: Vec<(usize, Concept)>) -> Result<Self, OntologyError> {
        let mut concepts = BTreeMap::new();
        for (line, c) in list {
            if concepts.contains_key(&c.id) {
                return Err(OntologyError::DuplicateId { line, id: c.id.0 });
            }
            concepts.insert(c.id.clone(), c);
        }
        let root = concepts.get(ROOT_ID).ok_or(OntologyError::MissingRoot)?;
        if !root.parents.is_empty() {
            return Err(OntologyError::RootHasParents);
        }
        for c in concepts.values() {
            for p in &c.parents {
                if !concepts.contains_key(p) {
                    return Err(OntologyError::DanglingParent {
                        id: c.id.0.clone(),
                        parent: p.0.clone(),
                    });
                }
            }
        }
        let ancestors = ancestor_closure(&concepts)?;
        for c in concepts.values() {
            if c.parents.is_empty() && c.id.as_str() != ROOT_ID {
                return Err(OntologyError::MultipleRoots { id: c.id.0.clone() });
            }
            check_template(c)?;
        }
        Ok(Self { concepts, ancestors })
    }

    pub fn root(&self) -> &Concept {
        &self.concepts[ROOT_ID]
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Concept> {
        self.concepts.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.concepts.contains_key(id)
    }

    /// Concept ids in lexicographic order.
    pub fn ids(&self) -> impl Iterator<Item = &ConceptId> {
        self.concepts.keys()
    }

    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.values()
    }

    /// Is-a test: true iff `ancestor` is reachable from `descendant` through
    /// parent links (reflexive).
    pub fn subsumes(&self, ancestor: &str, descendant: &str) -> Result<bool, OntologyError> {
        if !self.contains(ancestor) {
            return Err(self.unknown(ancestor));
        }
        match self.ancestors.get(descendant) {
            Some(set) => Ok(set.contains(ancestor)),
            None => Err(self.unknown(descendant)),
        }
    }

    /// Like [`subsumes`](Self::subsumes), treating unknown ids as unrelated.
    pub fn is_a(&self, descendant: &str, ancestor: &str) -> bool {
        self.ancestors.get(descendant).is_some_and(|s| s.contains(ancestor))
    }

    /// Resolves a free term to a concept id, suggesting near misses.
    pub fn validate_term(&self, term: &str) -> Result<ConceptId, OntologyError> {
        match self.concepts.get_key_value(term) {
            Some((id, _)) => Ok(id.clone()),
            None => Err(self.unknown(term)),
        }
    }

    /// Up to three ids within edit distance 2, nearest first, ties by id.
    pub fn suggestions(&self, term: &str) -> Vec<ConceptId> {
        if term.is_empty() {
            return Vec::new();
        }
        let mut scored: Vec<(usize, &ConceptId)> = self
            .concepts
            .keys()
            .map(|id| (strsim::levenshtein(term, id.as_str()), id))
            .filter(|(d, _)| *d <= MAX_SUGGESTION_DISTANCE)
            .collect();
        scored.sort();
        scored.into_iter().take(MAX_SUGGESTIONS).map(|(_, id)| id.clone()).collect()
    }

    fn unknown(&self, term: &str) -> OntologyError {
        OntologyError::UnknownConcept {
            term: term.to_owned(),
            suggestions: self.suggestions(term),
        }
    }

    /// Renders the natural-language description of an event.
    pub fn describe_event(&self, event: &SensorEvent) -> Result<String, OntologyError> {
        let concept = self
            .concepts
            .get(event.concept.as_str())
            .ok_or_else(|| self.unknown(event.concept.as_str()))?;
        let mut out = String::with_capacity(concept.template.len() + 32);
        for piece in template_pieces(&concept.template) {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Placeholder(name) => match name {
                    "camera" => out.push_str(&event.camera_id),
                    "confidence" => out.push_str(&format!("{:.2}", event.confidence)),
                    "time" => out.push_str(&format_utc(event.timestamp)),
                    "label" => out.push_str(&concept.label),
                    attr => match event.attributes.get(attr) {
                        Some(v) => out.push_str(&v.to_string()),
                        None => {
                            return Err(OntologyError::MissingAttribute {
                                concept: concept.id.0.clone(),
                                attribute: attr.to_owned(),
                            })
                        }
                    },
                },
                Piece::Unterminated(_) => unreachable!("templates are checked at load"),
            }
        }
        Ok(out)
    }

    /// Renders the ontology back into the file format. `load` of the result
    /// reproduces `self`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        // Root first, then the rest in id order; any order loads identically.
        let ordered = std::iter::once(self.root())
            .chain(self.concepts.values().filter(|c| c.id.as_str() != ROOT_ID));
        for c in ordered {
            out.push_str("concept ");
            out.push_str(c.id.as_str());
            if !c.parents.is_empty() {
                let parents: Vec<&str> = c.parents.iter().map(ConceptId::as_str).collect();
                out.push_str(" : ");
                out.push_str(&parents.join(","));
            }
            out.push_str(" | label=");
            out.push_str(&quote(&c.label));
            out.push_str(" | template=");
            out.push_str(&quote(&c.template));
            out.push('\n');
            for (name, kind) in &c.attributes {
                out.push_str(&format!("attr {name}:{}\n", kind.as_str()));
            }
        }
        out
    }
}

/// ISO-8601 UTC with millisecond precision.
pub fn format_utc(ts: i64) -> String {
    match DateTime::<Utc>::from_timestamp_millis(ts) {
        Some(dt) => dt.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string(),
        None => ts.to_string(),
    }
}

fn ancestor_closure(
    concepts: &BTreeMap<ConceptId, Concept>,
) -> Result<BTreeMap<ConceptId, BTreeSet<ConceptId>>, OntologyError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Active,
        Done,
    }
    fn visit(
        id: &ConceptId,
        concepts: &BTreeMap<ConceptId, Concept>,
        marks: &mut BTreeMap<ConceptId, Mark>,
        out: &mut BTreeMap<ConceptId, BTreeSet<ConceptId>>,
    ) -> Result<(), OntologyError> {
        match marks.get(id) {
            Some(Mark::Done) => return Ok(()),
            Some(Mark::Active) => return Err(OntologyError::CycleDetected { id: id.0.clone() }),
            None => {}
        }
        marks.insert(id.clone(), Mark::Active);
        let mut set = BTreeSet::from([id.clone()]);
        for p in &concepts[id].parents {
            visit(p, concepts, marks, out)?;
            set.extend(out[p].iter().cloned());
        }
        marks.insert(id.clone(), Mark::Done);
        out.insert(id.clone(), set);
        Ok(())
    }

    let mut marks = BTreeMap::new();
    let mut out = BTreeMap::new();
    for id in concepts.keys() {
        visit(id, concepts, &mut marks, &mut out)?;
    }
    Ok(out)
}

enum Piece<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
    Unterminated(usize),
}

fn template_pieces(template: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut rest = template;
    let mut offset = 0;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            pieces.push(Piece::Literal(&rest[..open]));
        }
        match rest[open + 1..].find('}') {
            Some(len) => {
                pieces.push(Piece::Placeholder(&rest[open + 1..open + 1 + len]));
                let consumed = open + len + 2;
                rest = &rest[consumed..];
                offset += consumed;
            }
            None => {
                pieces.push(Piece::Unterminated(offset + open));
                return pieces;
            }
        }
    }
    if !rest.is_empty() {
        pieces.push(Piece::Literal(rest));
    }
    pieces
}

fn check_template(c: &Concept) -> Result<(), OntologyError> {
    let err = |message: String| OntologyError::InvalidTemplate { id: c.id.0.clone(), message };
    if c.template.is_empty() {
        return Err(err("template is empty".into()));
    }
    for piece in template_pieces(&c.template) {
        match piece {
            Piece::Literal(_) => {}
            Piece::Unterminated(at) => return Err(err(format!("unterminated `{{` at byte {at}"))),
            Piece::Placeholder(name) => {
                if !is_identifier(name) {
                    return Err(err(format!("bad placeholder `{{{name}}}`")));
                }
                let known = FIXED_PLACEHOLDERS.contains(&name)
                    || c.attributes.iter().any(|(a, _)| a == name);
                if !known {
                    return Err(err(format!("placeholder `{{{name}}}` is not a declared attribute")));
                }
            }
        }
    }
    Ok(())
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

struct LineCursor<'a> {
    text: &'a str,
    pos: usize,
    line: usize,
}

impl<'a> LineCursor<'a> {
    fn err(&self, message: impl Into<String>) -> OntologyError {
        OntologyError::Syntax { line: self.line, message: message.into() }
    }

    fn skip_ws(&mut self) {
        let trimmed = self.text[self.pos..].trim_start();
        self.pos = self.text.len() - trimmed.len();
    }

    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn eat(&mut self, ch: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(ch) {
            self.pos += ch.len_utf8();
            true
        } else {
            false
        }
    }

    fn ident(&mut self, what: &str) -> Result<&'a str, OntologyError> {
        self.skip_ws();
        let rest = &self.text[self.pos..];
        let len = rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(rest.len());
        let word = &rest[..len];
        if word.is_empty() {
            return Err(self.err(format!("expected {what}")));
        }
        if !is_identifier(word) {
            return Err(self.err(format!("{what} `{word}` must match [a-z0-9_]+")));
        }
        self.pos += len;
        Ok(word)
    }

    fn quoted(&mut self) -> Result<String, OntologyError> {
        self.skip_ws();
        if !self.eat('"') {
            return Err(self.err("expected `\"`"));
        }
        let mut out = String::new();
        let mut chars = self.text[self.pos..].char_indices();
        while let Some((i, ch)) = chars.next() {
            match ch {
                '"' => {
                    self.pos += i + 1;
                    return Ok(out);
                }
                '\\' => match chars.next() {
                    Some((_, '"')) => out.push('"'),
                    Some((_, '\\')) => out.push('\\'),
                    Some((_, 'n')) => out.push('\n'),
                    Some((_, 't')) => out.push('\t'),
                    Some((_, 'r')) => out.push('\r'),
                    Some((_, other)) => return Err(self.err(format!("unknown escape `\\{other}`"))),
                    None => break,
                },
                c => out.push(c),
            }
        }
        Err(self.err("unterminated string"))
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos == self.text.len()
    }
}

fn parse_file(source: &str) -> Result<Vec<(usize, Concept)>, OntologyError> {
    let mut concepts: Vec<(usize, Concept)> = Vec::new();
    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut cur = LineCursor { text: trimmed, pos: 0, line: line_no };
        let keyword = cur.ident("keyword")?;
        match keyword {
            "concept" => concepts.push((line_no, parse_concept(&mut cur)?)),
            "attr" => {
                let name = cur.ident("attribute name")?.to_owned();
                if !cur.eat(':') {
                    return Err(cur.err("expected `:` after attribute name"));
                }
                let kind = match cur.ident("attribute kind")? {
                    "text" => AttrKind::Text,
                    "number" => AttrKind::Number,
                    "flag" => AttrKind::Flag,
                    other => return Err(cur.err(format!("unknown attribute kind `{other}`"))),
                };
                if !cur.at_end() {
                    return Err(cur.err("trailing input after attribute"));
                }
                if FIXED_PLACEHOLDERS.contains(&name.as_str()) {
                    return Err(cur.err(format!("attribute `{name}` shadows a built-in placeholder")));
                }
                let Some((_, concept)) = concepts.last_mut() else {
                    return Err(cur.err("`attr` before any `concept`"));
                };
                if concept.attributes.iter().any(|(n, _)| *n == name) {
                    return Err(cur.err(format!("attribute `{name}` declared twice")));
                }
                concept.attributes.push((name, kind));
            }
            other => return Err(cur.err(format!("unknown keyword `{other}`"))),
        }
    }
    Ok(concepts)
}

fn parse_concept(cur: &mut LineCursor<'_>) -> Result<Concept, OntologyError> {
    let id = ConceptId(cur.ident("concept id")?.to_owned());
    let mut parents = Vec::new();
    if cur.eat(':') {
        cur.skip_ws();
        if cur.peek().is_some_and(|c| c != '|') {
            loop {
                let p = ConceptId(cur.ident("parent id")?.to_owned());
                if parents.contains(&p) {
                    return Err(cur.err(format!("parent `{p}` listed twice")));
                }
                parents.push(p);
                if !cur.eat(',') {
                    break;
                }
            }
        }
    }
    let mut label = None;
    let mut template = None;
    while cur.eat('|') {
        let key = cur.ident("field name")?;
        if !cur.eat('=') {
            return Err(cur.err(format!("expected `=` after `{key}`")));
        }
        let value = cur.quoted()?;
        let slot = match key {
            "label" => &mut label,
            "template" => &mut template,
            other => return Err(cur.err(format!("unknown field `{other}`"))),
        };
        if slot.replace(value).is_some() {
            return Err(cur.err(format!("field `{key}` given twice")));
        }
    }
    if !cur.at_end() {
        return Err(cur.err("unexpected trailing input"));
    }
    Ok(Concept {
        label: label.unwrap_or_else(|| id.0.replace('_', " ")),
        template: template.unwrap_or_else(|| DEFAULT_TEMPLATE.to_owned()),
        id,
        parents,
        attributes: Vec::new(),
    })
}
