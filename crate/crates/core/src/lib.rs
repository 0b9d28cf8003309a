//! Reference-standard construction and grader/algorithm comparison statistics
//! for diabetic-retinopathy screening programs.
//!
//! The crate is organised the way the evaluation flows:
//!
//! - [`model`]: shared value types (severity scales, grades, confidences).
//! - [`cascade`]: turns per-level algorithm confidences into discrete calls.
//! - [`sampling`]: sample-size estimation, gradability reconciliation and
//!   selection of the images that go to the specialist panel.
//! - [`adjudication`]: the multi-round specialist state machine and reference
//!   standard assembly, persisted through [`eventlog`].
//! - [`metrics`]: confusion matrices, sensitivity/specificity with exact
//!   intervals, ROC/AUC, weighted kappa, bootstrap and permutation tests.

pub mod adjudication;
pub mod cascade;
pub mod error;
pub mod eventlog;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};
