//! Semantic event fusion for camera networks: ontology, durable event log,
//! temporal pattern matching, online normality and severity learning, and
//! operator-feedback camera prioritization.

pub mod event;
pub mod learning;
pub mod ontology;
pub mod pattern;
pub mod retex;
pub mod store;

pub use event::{Millis, SensorEvent};
pub use ontology::{ConceptId, Ontology};
