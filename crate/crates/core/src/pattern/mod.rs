//! Temporal sequence patterns over event streams.
//!
//! ```text
//! pattern := term | "SEQ(" pattern ("," pattern)+ ")" "WITHIN" integer "s" [scope]
//! term    := concept_id [">=" confidence]
//! scope   := "SAME" "CAMERA"
//! ```
//!
//! A term matches any event whose concept it subsumes and whose confidence
//! reaches the threshold. A sequence matches one event per child, strictly
//! increasing in time, spanning at most `WITHIN` seconds. Matching skips
//! unrelated events in between. For each event that can close a match, the
//! reported match picks the latest feasible predecessor for every earlier
//! position, working backwards from the end.

mod matcher;
mod parser;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::Millis;
use crate::ontology::{ConceptId, OntologyError};

pub use matcher::{Matcher, StreamMatcher};
pub use parser::parse_pattern;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatternError {
    #[error("syntax error at {position}: expected {expected}")]
    Syntax { position: usize, expected: String },
    #[error("unknown concept `{term}` in pattern")]
    UnknownConcept { term: String, suggestions: Vec<ConceptId> },
    #[error("events not sorted by (timestamp, event_id) at index {index}")]
    UnsortedInput { index: usize },
    #[error("event `{event_id}` at {timestamp} arrived after {last}")]
    OutOfOrderEvent { event_id: String, timestamp: Millis, last: Millis },
}

impl From<OntologyError> for PatternError {
    fn from(e: OntologyError) -> Self {
        match e {
            OntologyError::UnknownConcept { term, suggestions } => {
                PatternError::UnknownConcept { term, suggestions }
            }
            other => PatternError::Syntax { position: 0, expected: other.to_string() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    AnyCamera,
    SameCamera,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PatternAst {
    Term {
        concept: ConceptId,
        min_confidence: f64,
    },
    Seq {
        children: Vec<PatternAst>,
        /// Milliseconds; whole seconds in the surface syntax.
        within: Millis,
        scope: Scope,
    },
}

impl PatternAst {
    pub fn term(concept: ConceptId) -> Self {
        PatternAst::Term { concept, min_confidence: 0.0 }
    }

    /// Nesting depth: 0 for a term.
    pub fn depth(&self) -> usize {
        match self {
            PatternAst::Term { .. } => 0,
            PatternAst::Seq { children, .. } => {
                1 + children.iter().map(PatternAst::depth).max().unwrap_or(0)
            }
        }
    }

    pub fn term_count(&self) -> usize {
        match self {
            PatternAst::Term { .. } => 1,
            PatternAst::Seq { children, .. } => children.iter().map(PatternAst::term_count).sum(),
        }
    }
}

impl fmt::Display for PatternAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatternAst::Term { concept, min_confidence } => {
                write!(f, "{concept}")?;
                if *min_confidence > 0.0 {
                    write!(f, " >= {min_confidence}")?;
                }
                Ok(())
            }
            PatternAst::Seq { children, within, scope } => {
                f.write_str("SEQ(")?;
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{c}")?;
                }
                write!(f, ") WITHIN {}s", within / 1000)?;
                if *scope == Scope::SameCamera {
                    f.write_str(" SAME CAMERA")?;
                }
                Ok(())
            }
        }
    }
}

/// One occurrence of a pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    /// Matched events, one per term, in time order.
    pub event_ids: Vec<String>,
    pub start: Millis,
    pub end: Millis,
    pub pattern_text: String,
    /// Camera of the closing event; the alert is attributed to it.
    pub camera_id: String,
}
