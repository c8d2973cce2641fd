use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use percent_encoding::{utf8_percent_encode, AsciiSet, CONTROLS};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sketchret_core::DistanceMode;

use crate::AppState;

/// Largest accepted request body.
pub const MAX_BODY_BYTES: usize = 2 * 1024 * 1024;

/// Characters escaped inside a path; `/` stays literal so ids keep their segments.
const PATH: &AsciiSet =
    &CONTROLS.add(b' ').add(b'"').add(b'#').add(b'%').add(b'<').add(b'>').add(b'?').add(b'`').add(b'{').add(b'}');

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryRequest {
    pub sketch_png_base64: String,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub rerank: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub id: String,
    pub label: String,
    pub distance: f64,
    pub thumbnail_url: String,
    pub mode: DistanceMode,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<QueryResult>,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub name: String,
    pub images: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RebuildResponse {
    pub index_size: usize,
    /// Images that could not be encoded, with the reason.
    pub skipped: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

enum ApiError {
    BadRequest(String),
    TooLarge,
    NotFound,
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::BadRequest(reason) => (StatusCode::BAD_REQUEST, json!({ "error": reason })),
            ApiError::TooLarge => (
                StatusCode::PAYLOAD_TOO_LARGE,
                json!({ "error": format!("request body exceeds {MAX_BODY_BYTES} bytes") }),
            ),
            ApiError::NotFound => (StatusCode::NOT_FOUND, json!({ "error": "not found" })),
            ApiError::Internal(detail) => {
                let id = uuid::Uuid::new_v4();
                log::error!("request {id} failed: {detail}");
                (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "internal error", "id": id.to_string() }))
            }
        };
        (status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::TooLarge
        } else {
            ApiError::BadRequest(r.body_text())
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/query", post(query))
        .route("/image/{*id}", get(image))
        .route("/classes", get(classes))
        .route("/index/rebuild", post(rebuild))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let index = state.snapshot();
    Json(json!({ "status": "ok", "d": index.dim, "index_size": index.len() }))
}

async fn query(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<QueryRequest>, JsonRejection>,
) -> Result<Json<QueryResponse>, ApiError> {
    let started = Instant::now();
    let Json(req) = payload?;
    let k = req.k.unwrap_or(state.config.default_k);
    if k == 0 {
        return Err(ApiError::BadRequest("k must be at least 1".into()));
    }
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(req.sketch_png_base64.trim())
        .map_err(|e| ApiError::BadRequest(format!("sketch_png_base64 is not valid base64: {e}")))?;

    let worker = Arc::clone(&state);
    let ranked = tokio::task::spawn_blocking(move || {
        let tokens =
            worker.encode_sketch(&bytes).map_err(|e| ApiError::BadRequest(format!("could not decode sketch: {e}")))?;
        worker.query(&tokens, k, req.rerank).map_err(|e| ApiError::Internal(e.to_string()))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;

    let results = ranked
        .hits
        .into_iter()
        .map(|h| QueryResult {
            thumbnail_url: format!("/image/{}", utf8_percent_encode(&h.id, PATH)),
            id: h.id,
            label: h.label,
            distance: h.distance,
            mode: h.mode,
        })
        .collect();
    Ok(Json(QueryResponse { results, latency_ms: started.elapsed().as_secs_f64() * 1e3 }))
}

/// Serves only ids present in the current index.
async fn image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    if state.snapshot().get(&id).is_none() {
        return Err(ApiError::NotFound);
    }
    let path = state.asset_path(&id).ok_or(ApiError::NotFound)?;
    let bytes = match tokio::fs::read(&path).await {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(ApiError::NotFound),
        Err(e) => return Err(ApiError::Internal(format!("{}: {e}", path.display()))),
    };
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn classes(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let index = state.snapshot();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &index.entries {
        *counts.entry(e.label.as_str()).or_default() += 1;
    }
    let classes: Vec<ClassCount> =
        counts.into_iter().map(|(name, images)| ClassCount { name: name.to_string(), images }).collect();
    Json(json!({ "classes": classes }))
}

async fn rebuild(State(state): State<Arc<AppState>>) -> Result<Json<RebuildResponse>, ApiError> {
    let (index_size, report, warnings) = state.rebuild().await.map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(RebuildResponse { index_size, skipped: report.skipped, warnings }))
}
