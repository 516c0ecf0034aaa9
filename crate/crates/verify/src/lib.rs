//! HTTP interface to a [`VerifyStore`].
//!
//! | method | path | body / query | response |
//! |---|---|---|---|
//! | GET | `/tasks` | `state`, `page` (from 1), `page_size` | [`TaskPage`] |
//! | GET | `/tasks/{id}` | | [`VerificationTask`] |
//! | GET | `/tasks/{id}/overlay.png`, `/tasks/{id}/crop.png` | | PNG |
//! | POST | `/tasks/{id}/decision` | [`DecisionRequest`], header `X-Annotator-Id` | [`VerificationTask`] |
//! | GET | `/progress` | | [`Progress`] |
//! | POST | `/export` | | [`ExportSummary`] |
//!
//! Errors are `{"error": message}` with status 400 (bad request or missing
//! annotator), 404 (unknown segment), 409 (already decided and `if_pending`
//! was set) or 422 (name not allowed for the segment).

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use segrename::verify::{DecisionRequest, TaskState, VerifyStore};
use segrename::Error;

pub use segrename::verify::{ExportSummary, Progress, TaskPage, VerificationTask};

pub const ANNOTATOR_HEADER: &str = "x-annotator-id";
pub const DEFAULT_PAGE_SIZE: usize = 50;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<VerifyStore>,
    pub export_dir: PathBuf,
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::Unknown { .. } => StatusCode::NOT_FOUND,
        Error::AlreadyDecided(_) => StatusCode::CONFLICT,
        Error::DisallowedChoice { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        Error::Config(_) | Error::InvalidData(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_of(&self.0);
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct ListQuery {
    pub state: Option<TaskState>,
    pub page: Option<usize>,
    pub page_size: Option<usize>,
}

async fn list_tasks(State(app): State<AppState>, Query(q): Query<ListQuery>) -> Result<Json<TaskPage>, ApiError> {
    let page = app
        .store
        .list_tasks(q.state, q.page.unwrap_or(1), q.page_size.unwrap_or(DEFAULT_PAGE_SIZE))?;
    Ok(Json(page))
}

async fn get_task(State(app): State<AppState>, Path(id): Path<u64>) -> Result<Json<VerificationTask>, ApiError> {
    Ok(Json(app.store.get_task(id)?))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn overlay(State(app): State<AppState>, Path(id): Path<u64>) -> Result<Response, ApiError> {
    Ok(png(app.store.overlay_png(id)?))
}

async fn crop(State(app): State<AppState>, Path(id): Path<u64>) -> Result<Response, ApiError> {
    Ok(png(app.store.crop_png(id)?))
}

async fn decide(
    State(app): State<AppState>,
    Path(id): Path<u64>,
    headers: HeaderMap,
    Json(request): Json<DecisionRequest>,
) -> Result<Json<VerificationTask>, ApiError> {
    let annotator = headers
        .get(ANNOTATOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|v| !v.trim().is_empty())
        .ok_or_else(|| Error::InvalidData("missing X-Annotator-Id header".into()))?;
    Ok(Json(app.store.post_decision(id, annotator, &request)?))
}

async fn progress(State(app): State<AppState>) -> Json<Progress> {
    Json(app.store.progress())
}

async fn export(State(app): State<AppState>) -> Result<Json<ExportSummary>, ApiError> {
    Ok(Json(app.store.export(&app.export_dir)?))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/tasks", get(list_tasks))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/overlay.png", get(overlay))
        .route("/tasks/{id}/crop.png", get(crop))
        .route("/tasks/{id}/decision", post(decide))
        .route("/progress", get(progress))
        .route("/export", post(export))
        .with_state(state)
}

/// Serve until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("verification server listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
