//! Confidence pruning of detector anchors, capacity sweeps and frame-mAP
//! evaluation for spatiotemporal action localization, plus a toy dual-stream
//! feature fusion pipeline.

pub mod cli;
pub mod config;
pub mod data;
pub mod fusion;
pub mod metrics;
pub mod output;
pub mod prune;
pub mod rng;
pub mod sweep;
pub mod synth;

pub use data::{BoundingBox, Detection, DetectionStore, FrameKey, GroundTruth, GroundTruthStore};
pub use metrics::{mean_average_precision, EvalReport};
pub use prune::{prune, PruneMode};
pub use sweep::{sweep, CapacityRange, Schedule, SweepResult};
