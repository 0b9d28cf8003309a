//! Screening-evaluation pipeline: ingestion, synthetic cohorts, reference
//! assembly, metrics and report emission.

pub mod adjudicate;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod ingest;
pub mod pipeline;
pub mod report;
pub mod synth;

pub use config::EvalConfig;
pub use error::{EvalError, Result};
pub use pipeline::{run_evaluation, PipelineOutput};
pub use report::{emit_report, EvalReport};
