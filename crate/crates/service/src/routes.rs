//! HTTP routes. Bodies are parsed by hand so that every failure, including
//! malformed JSON, comes back in the same error envelope.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use tower_http::services::ServeDir;

use crate::api::{CreateRequest, FeedbackRequest};
use crate::error::ApiError;
use crate::store::{Rendered, SessionStore};

type Shared = Arc<SessionStore>;

pub fn router(store: Shared) -> Router {
    let limit = store.config().max_body_bytes;
    let static_dir = store.config().static_dir.clone();
    let api = Router::new()
        .route("/healthz", get(health))
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(show).delete(remove))
        .route("/sessions/{id}/feedback", post(feedback))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(store);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { ApiError::not_found("no such route") }),
    }
}

fn parse<T: DeserializeOwned>(body: Result<Bytes, BytesRejection>) -> Result<T, ApiError> {
    let body = body.map_err(|e| {
        let code = if e.status() == StatusCode::PAYLOAD_TOO_LARGE { "payload_too_large" } else { "malformed_payload" };
        ApiError::new(e.status(), code, e.body_text())
    })?;
    serde_json::from_slice(&body).map_err(|e| ApiError::bad_request("malformed_payload", e.to_string()))
}

fn json(status: StatusCode, rendered: Rendered) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], rendered.json).into_response()
}

async fn health(State(store): State<Shared>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "sessions": store.len() }))
}

async fn create(State(store): State<Shared>, body: Result<Bytes, BytesRejection>) -> Result<Response, ApiError> {
    let request: CreateRequest = parse(body)?;
    let rendered = tokio::task::spawn_blocking(move || store.create(request))
        .await
        .map_err(|e| ApiError::internal(format!("create task failed: {e}")))??;
    tracing::info!(session = %rendered.payload.session_id, "session created");
    Ok(json(StatusCode::CREATED, rendered))
}

async fn show(State(store): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(json(StatusCode::OK, store.get(&id).await?))
}

async fn feedback(
    State(store): State<Shared>,
    Path(id): Path<String>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Response, ApiError> {
    let request: FeedbackRequest = parse(body)?;
    Ok(json(StatusCode::OK, store.feedback(&id, request).await?))
}

async fn remove(State(store): State<Shared>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    store.delete(&id)?;
    Ok(StatusCode::NO_CONTENT)
}
