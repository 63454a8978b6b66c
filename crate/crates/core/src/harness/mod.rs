//! Experiment harness: builds zoos, runs merges and routed inference, and
//! writes results.

pub mod config;
pub mod experiments;
pub mod inference;
pub mod metrics;
pub mod pipeline;
pub mod report;

pub use config::{EvalConfig, RunConfig};
pub use inference::{infer, run_inference, Inference, InferenceMode, InferenceOptions};
pub use metrics::{normalized_score, storage_report, StorageAccount};
pub use pipeline::{build_twin, recompress, Compression, ExpertSettings, Split, TwinSystem, Zoo};
pub use report::{CsvRow, ExperimentReport};
