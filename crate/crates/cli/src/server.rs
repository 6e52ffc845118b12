//! HTTP API over the engine. Every route requires `Authorization: Bearer
//! <token>`; engine calls block, so they run on the blocking pool.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mdtb_core::datalake::DataLakeError;
use mdtb_core::engine::EngineError;
use mdtb_core::evaluation::Summary;
use mdtb_core::records_store::RecordsError;
use mdtb_core::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as JsonValue};
use tower_http::trace::{DefaultMakeSpan, DefaultOnResponse, TraceLayer};
use tracing::Level;

const MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;

#[derive(Clone)]
struct AppState {
    engine: Arc<Engine>,
    token: Arc<str>,
}

pub fn router(engine: Arc<Engine>, token: &str) -> Router {
    let state = AppState {
        engine,
        token: token.into(),
    };
    Router::new()
        .route("/health", get(health))
        .route("/schema", get(schema))
        .route("/cases/{id}/ingest", post(ingest))
        .route("/cases/{id}/autofill", post(autofill))
        .route("/cases/{id}/form", get(get_form).patch(patch_form))
        .route("/cases/{id}/provenance/{field}", get(provenance))
        .route("/benchmark", post(benchmark))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .layer(
            TraceLayer::new_for_http()
                .make_span_with(DefaultMakeSpan::new().level(Level::INFO))
                .on_response(DefaultOnResponse::new().level(Level::INFO)),
        )
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(engine: Arc<Engine>, bind: &str, token: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(engine, token))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let presented = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    match presented {
        Some(t) if constant_time_eq(t.as_bytes(), state.token.as_bytes()) => next.run(req).await,
        _ => ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token").into_response(),
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: JsonValue,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({"error": code, "message": message.into()}),
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        let (status, code) = match &e {
            EngineError::CaseNotFound(_) => (StatusCode::NOT_FOUND, "case_not_found"),
            EngineError::UnknownField(_) => (StatusCode::NOT_FOUND, "unknown_field"),
            EngineError::UnknownBackend(_) => (StatusCode::BAD_REQUEST, "unknown_backend"),
            EngineError::Busy(_) | EngineError::DataLake(DataLakeError::Locked(_)) => (StatusCode::CONFLICT, "conflict"),
            EngineError::Validation(errors) => {
                return Self {
                    status: StatusCode::UNPROCESSABLE_ENTITY,
                    body: json!({"error": "validation", "message": message, "fields": errors}),
                }
            }
            EngineError::DataLake(DataLakeError::InvalidCaseId(_)) | EngineError::Records(RecordsError::InvalidCaseId(_)) => {
                (StatusCode::BAD_REQUEST, "invalid_case_id")
            }
            EngineError::Config(_) => (StatusCode::BAD_REQUEST, "not_configured"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status.is_server_error() {
            tracing::error!(error = %message, "request failed");
        }
        Self::new(status, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// Rebuilds objects with keys in sorted order, whatever map type serde_json
/// was compiled with.
fn sort_keys(v: JsonValue) -> JsonValue {
    match v {
        JsonValue::Object(map) => {
            let mut entries: Vec<_> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            JsonValue::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        JsonValue::Array(items) => JsonValue::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

fn stable<T: Serialize>(value: &T) -> Response {
    let v = serde_json::to_value(value).expect("response serializes");
    Json(sort_keys(v)).into_response()
}

async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, EngineError> + Send + 'static,
{
    let engine = state.engine.clone();
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn health(State(state): State<AppState>) -> Response {
    stable(&state.engine.health())
}

async fn schema(State(state): State<AppState>) -> Response {
    stable(state.engine.schema())
}

#[derive(Deserialize)]
struct IngestPaths {
    paths: Vec<PathBuf>,
}

/// Keeps the file name's last component and replaces anything unusual, so
/// uploads cannot escape the scratch directory.
fn upload_name(raw: Option<&str>, i: usize) -> String {
    let base = raw.and_then(|n| Path::new(n).file_name()).and_then(|n| n.to_str()).unwrap_or("");
    let clean: String = base
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect();
    if clean.is_empty() || clean.starts_with('.') {
        format!("upload-{i}.txt")
    } else {
        clean
    }
}

async fn ingest(State(state): State<AppState>, UrlPath(case_id): UrlPath<String>, req: Request<Body>) -> Result<Response, ApiError> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let bad = |e: String| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e);
    let (paths, scratch) = if is_multipart {
        let mut form = Multipart::from_request(req, &()).await.map_err(|e| bad(e.body_text()))?;
        let dir = tempfile::tempdir().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
        let mut paths = Vec::new();
        while let Some(field) = form.next_field().await.map_err(|e| bad(e.body_text()))? {
            let name = upload_name(field.file_name(), paths.len());
            let bytes = field.bytes().await.map_err(|e| bad(e.body_text()))?;
            // duplicate names get a numeric prefix
            let mut path = dir.path().join(&name);
            if path.exists() {
                path = dir.path().join(format!("{}-{name}", paths.len()));
            }
            tokio::fs::write(&path, &bytes)
                .await
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
            paths.push(path);
        }
        (paths, Some(dir))
    } else {
        let Json(body) = Json::<IngestPaths>::from_request(req, &()).await.map_err(|e| bad(e.body_text()))?;
        (body.paths, None)
    };
    if paths.is_empty() {
        return Err(bad("no documents supplied".into()));
    }
    let manifest = blocking(&state, move |engine| {
        let result = engine.ingest(&case_id, &paths);
        drop(scratch);
        result
    })
    .await?;
    Ok(stable(&manifest))
}

#[derive(Deserialize)]
struct AutofillQuery {
    backend: String,
}

async fn autofill(
    State(state): State<AppState>,
    UrlPath(case_id): UrlPath<String>,
    Query(q): Query<AutofillQuery>,
) -> Result<Response, ApiError> {
    let report = blocking(&state, move |engine| engine.autofill(&case_id, &q.backend)).await?;
    Ok(stable(&report))
}

async fn get_form(State(state): State<AppState>, UrlPath(case_id): UrlPath<String>) -> Result<Response, ApiError> {
    let view = blocking(&state, move |engine| engine.form(&case_id)).await?;
    Ok(stable(&view))
}

#[derive(Deserialize)]
struct FieldUpdate {
    field_id: String,
    value: JsonValue,
}

#[derive(Deserialize)]
struct PatchBody {
    #[serde(default)]
    user_id: Option<String>,
    updates: Vec<FieldUpdate>,
}

async fn patch_form(
    State(state): State<AppState>,
    UrlPath(case_id): UrlPath<String>,
    body: Result<Json<PatchBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))?;
    let user = body.user_id.unwrap_or_else(|| "anonymous".to_string());
    let updates: Vec<(String, JsonValue)> = body.updates.into_iter().map(|u| (u.field_id, u.value)).collect();
    let view = blocking(&state, move |engine| engine.patch_form(&case_id, &updates, &user)).await?;
    Ok(stable(&view))
}

#[derive(Serialize)]
struct ProvenanceResponse {
    case_id: String,
    field_id: String,
    items: Vec<mdtb_core::engine::ProvenanceItem>,
}

async fn provenance(State(state): State<AppState>, UrlPath((case_id, field_id)): UrlPath<(String, String)>) -> Result<Response, ApiError> {
    let (c, f) = (case_id.clone(), field_id.clone());
    let items = blocking(&state, move |engine| engine.provenance(&c, &f)).await?;
    Ok(stable(&ProvenanceResponse { case_id, field_id, items }))
}

#[derive(Deserialize, Default)]
struct BenchmarkBody {
    #[serde(default)]
    backends: Vec<String>,
}

#[derive(Serialize)]
struct BackendSummary {
    backend_id: String,
    n_cases: usize,
    accuracy: Summary,
    latency: Summary,
}

#[derive(Serialize)]
struct BenchmarkResponse {
    out_dir: PathBuf,
    files: Vec<PathBuf>,
    backends: Vec<BackendSummary>,
}

/// Reports always go under the lake's refined layer; clients cannot pick a
/// server path to write to.
async fn benchmark(State(state): State<AppState>, body: Option<Json<BenchmarkBody>>) -> Result<Response, ApiError> {
    let body = body.map(|Json(b)| b).unwrap_or_default();
    let out = blocking(&state, move |engine| {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
        let dir = engine.lake().root().join("refined").join("benchmarks").join(stamp);
        engine.benchmark(&body.backends, &dir)
    })
    .await?;
    Ok(stable(&BenchmarkResponse {
        out_dir: out.out_dir,
        files: out.files,
        backends: out
            .reports
            .into_iter()
            .map(|r| BackendSummary {
                backend_id: r.backend_id,
                n_cases: r.n_cases,
                accuracy: r.accuracy,
                latency: r.latency,
            })
            .collect(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upload_names_stay_inside_scratch() {
        assert_eq!(upload_name(Some("../../etc/passwd"), 0), "passwd");
        assert_eq!(upload_name(Some("informe clínico.txt"), 0), "informe_cl_nico.txt");
        assert_eq!(upload_name(Some(".hidden"), 3), "upload-3.txt");
        assert_eq!(upload_name(None, 1), "upload-1.txt");
    }

    #[test]
    fn sorted_keys_recursively() {
        let v = sort_keys(json!({"b": 1, "a": {"z": [{"y": 1, "x": 2}], "c": 0}}));
        assert_eq!(v.to_string(), r#"{"a":{"c":0,"z":[{"x":2,"y":1}]},"b":1}"#);
    }

    #[test]
    fn token_comparison() {
        assert!(constant_time_eq(b"abc", b"abc"));
        assert!(!constant_time_eq(b"abc", b"abd"));
        assert!(!constant_time_eq(b"abc", b"abcd"));
    }
}
