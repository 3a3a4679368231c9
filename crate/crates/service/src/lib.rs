//! HTTP service for the annotation loop: ranked queue, interval labels,
//! background annotator retraining, predictions and export.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/queue` | unlabelled ids in ranking order |
//! | GET | `/sequence/{id}` | frames, labels and predictions |
//! | POST | `/labels` | store interval labels of one sequence |
//! | POST | `/retrain` | start a retrain, returns `job_id` |
//! | GET | `/status/{job_id}` | job state, duration, fit on the labels |
//! | GET | `/history` | every retrain so far |
//! | POST | `/reload` | re-read the class list and annotator config |
//! | GET | `/export` | tar of labels and predictions |

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

mod export;
mod session;

pub use export::archive;
pub use session::{
    Interval, JobState, JobStatus, LabelRequest, QueueItem, ReloadSummary, RetrainJob, RetrainOutcome, SequenceView,
    ServiceConfig, Session,
};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error("config: {0}")]
    Config(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::BadRequest(_) | ServiceError::Config(_) => StatusCode::BAD_REQUEST,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

pub type SharedSession = Arc<RwLock<Session>>;

fn read(s: &SharedSession) -> std::sync::RwLockReadGuard<'_, Session> {
    s.read().unwrap_or_else(|p| p.into_inner())
}

fn write(s: &SharedSession) -> std::sync::RwLockWriteGuard<'_, Session> {
    s.write().unwrap_or_else(|p| p.into_inner())
}

pub fn router(session: SharedSession) -> Router {
    Router::new()
        .route("/queue", get(queue))
        .route("/sequence/{id}", get(sequence))
        .route("/labels", post(labels))
        .route("/retrain", post(retrain))
        .route("/status/{job_id}", get(status))
        .route("/history", get(history))
        .route("/reload", post(reload))
        .route("/export", get(export_archive))
        .with_state(session)
}

async fn queue(State(s): State<SharedSession>) -> Json<Vec<QueueItem>> {
    Json(read(&s).queue())
}

async fn sequence(State(s): State<SharedSession>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let guard = read(&s);
    Ok(Json(guard.sequence(&id)?).into_response())
}

async fn labels(
    State(s): State<SharedSession>,
    body: Result<Json<LabelRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<mocurate::data::LabelMatrix>, ServiceError> {
    let Json(req) = body.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    Ok(Json(write(&s).submit_labels(&req)?))
}

#[derive(Serialize)]
struct JobRef {
    job_id: u64,
}

async fn retrain(State(s): State<SharedSession>) -> Result<(StatusCode, Json<JobRef>), ServiceError> {
    let job = write(&s).begin_retrain()?;
    let job_id = job.job_id;
    let shared = Arc::clone(&s);
    tokio::spawn(async move {
        match tokio::task::spawn_blocking(move || job.run()).await {
            Ok(outcome) => write(&shared).finish_retrain(outcome),
            Err(e) => log::error!("retrain {job_id} worker panicked: {e}"),
        }
    });
    Ok((StatusCode::ACCEPTED, Json(JobRef { job_id })))
}

async fn status(State(s): State<SharedSession>, Path(job_id): Path<u64>) -> Result<Json<JobStatus>, ServiceError> {
    Ok(Json(read(&s).status(job_id)?))
}

async fn history(State(s): State<SharedSession>) -> Json<Vec<JobStatus>> {
    Json(read(&s).history())
}

async fn reload(State(s): State<SharedSession>, body: axum::body::Bytes) -> Result<Json<ReloadSummary>, ServiceError> {
    let config = if body.iter().all(u8::is_ascii_whitespace) {
        None
    } else {
        Some(serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(e.to_string()))?)
    };
    Ok(Json(write(&s).reload(config)?))
}

async fn export_archive(State(s): State<SharedSession>) -> Result<Response, ServiceError> {
    let bytes = read(&s).export()?;
    Ok(([(header::CONTENT_TYPE, "application/x-tar")], bytes).into_response())
}

/// Serves `session` on `addr` until the process is stopped.
pub async fn serve(session: Session, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(RwLock::new(session)))).await
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/service.md")]
mod book {}
