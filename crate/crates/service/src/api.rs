use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use drscreen_core::model::{GraderId, SessionId};
use serde::de::DeserializeOwned;

use crate::error::ServiceError;
use crate::store::{CohortResponse, Progress, SessionSummary, Store, WorkItem};

type Shared = State<Arc<Store>>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::bad_request(format!("request body: {e}")))
}

// Store calls are short and never await, so they run inline on the worker.

async fn work(State(store): Shared, Path(id): Path<String>) -> Result<Json<Vec<WorkItem>>, ServiceError> {
    store.work_for(&GraderId(id)).map(Json)
}

async fn submit(State(store): Shared, Path(id): Path<String>, body: Bytes) -> Result<Json<SessionSummary>, ServiceError> {
    store.submit(&SessionId(id), parse(&body)?).map(Json)
}

async fn session(State(store): Shared, Path(id): Path<String>) -> Result<Json<SessionSummary>, ServiceError> {
    store.summary(&SessionId(id)).map(Json)
}

async fn progress(State(store): Shared) -> Json<Progress> {
    Json(store.progress())
}

async fn cohorts(State(store): Shared, body: Bytes) -> Result<Json<CohortResponse>, ServiceError> {
    store.open_cohort(parse(&body)?).map(Json)
}

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/graders/{id}/work", get(work))
        .route("/sessions/{id}/grades", post(submit))
        .route("/sessions/{id}", get(session))
        .route("/progress", get(progress))
        .route("/cohorts", post(cohorts))
        .with_state(store)
}
