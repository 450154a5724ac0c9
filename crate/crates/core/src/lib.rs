//! Indoor-tracking workbench engine: scenario ingestion, pluggable
//! filtering/positioning/collaboration pipelines, execution replay and
//! trajectory metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod builtin;
pub mod eval;
pub mod geo;
pub mod ingest;
pub mod model;
pub mod plugins;
pub mod replay;
pub mod rundir;
pub mod synth;

pub use geo::GeoPoint;
pub use model::{Millis, RunResult, Scenario, Trajectory, TrajectoryKind};
pub use plugins::{PipelineConfig, Registry};
pub use replay::{run_replay, RunArtifacts};
