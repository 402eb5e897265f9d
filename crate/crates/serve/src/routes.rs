use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;

use crate::api::{
    CorrelationPayload, CreateSession, ErrorBody, ErrorDetail, Health, InterventionRequest,
    SessionPayload, SuggestionPayload,
};
use crate::state::{ApiError, ApiResult, AppState};

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(ErrorBody {
            error: ErrorDetail {
                kind: self.kind,
                message: self.message,
            },
        });
        if self.status == StatusCode::TOO_MANY_REQUESTS {
            (self.status, [(header::RETRY_AFTER, "1")], body).into_response()
        } else {
            (self.status, body).into_response()
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/interventions", post(apply))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/suggestion", get(suggestion))
        .route("/correlation", get(correlation))
        .with_state(state)
}

/// Parses a JSON body so malformed input is a 400 with the error schema.
fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("invalid request body: {e}")))
}

fn session_id(raw: &str) -> ApiResult<u64> {
    raw.parse()
        .map_err(|_| ApiError::not_found(format!("no session {raw:?}")))
}

/// Runs model work off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(state.health())
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<SessionPayload>)> {
    let req: CreateSession = parse(&body)?;
    let payload = blocking(move || state.create(req)).await?;
    Ok((StatusCode::CREATED, Json(payload)))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionPayload>> {
    let id = session_id(&id)?;
    let guard = state.try_lock(id)?;
    Ok(Json(state.payload(&guard)))
}

async fn apply(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SessionPayload>> {
    let id = session_id(&id)?;
    let mut guard = state.try_lock(id)?;
    let req: InterventionRequest = parse(&body)?;
    let payload = blocking(move || state.apply(&mut guard, req.concept, req.value)).await?;
    Ok(Json(payload))
}

async fn undo(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionPayload>> {
    let id = session_id(&id)?;
    let mut guard = state.try_lock(id)?;
    let payload = blocking(move || state.undo(&mut guard)).await?;
    Ok(Json(payload))
}

async fn suggestion(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<SuggestionPayload>> {
    let id = session_id(&id)?;
    let guard = state.try_lock(id)?;
    Ok(Json(state.suggestion(&guard)))
}

async fn correlation(
    State(state): State<Arc<AppState>>,
    Query(query): Query<HashMap<String, String>>,
) -> ApiResult<Json<CorrelationPayload>> {
    let session = match query.get("session") {
        Some(raw) => {
            let id = session_id(raw)?;
            let guard = state.try_lock(id)?;
            Some((id, guard.instance.info.covariates.clone()))
        }
        None => None,
    };
    let payload = blocking(move || {
        state.correlation(session.as_ref().map(|(id, x)| (*id, x.as_slice())))
    })
    .await?;
    Ok(Json(payload))
}
