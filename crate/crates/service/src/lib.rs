//! HTTP front end for live adjudication.
//!
//! | Method | Path | Body | Response |
//! |---|---|---|---|
//! | GET | `/graders/{id}/work` | | `[WorkItem]` |
//! | POST | `/sessions/{id}/grades` | `GradeRequest` | `SessionSummary` |
//! | GET | `/sessions/{id}` | | `SessionSummary` |
//! | GET | `/progress` | | `Progress` |
//! | POST | `/cohorts` | `CohortRequest` | `CohortResponse` |
//!
//! Errors come back as `{code, message, current_state}` with a matching
//! HTTP status. State lives in the same JSON-lines event log the evaluation
//! pipeline reads, and is rebuilt from it on start.

pub mod api;
pub mod error;
pub mod registry;
pub mod store;

pub use api::router;
pub use error::ServiceError;
pub use registry::Registry;
pub use store::Store;
