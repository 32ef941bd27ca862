//! Fusion server: wire protocol, serialized processing pipeline, network
//! front end, scenario simulator and replay.

pub mod config;
pub mod pipeline;
pub mod protocol;
pub mod replay;
pub mod server;
pub mod simulate;
