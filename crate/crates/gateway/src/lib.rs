//! HTTP service and command line over the intent-identification engine.

pub mod cli;
pub mod service;
pub mod snapshot;

pub use service::{router, AppState, VERSION};
pub use snapshot::{EngineSnapshot, SnapshotError, SnapshotPaths};
