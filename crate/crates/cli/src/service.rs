//! HTTP backend for the annotation workflow.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use pag_core::dataset::{canonical_json, Dataset, GroundingSample, PhraseSpan};
use pag_core::error::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::store::{span_set, AnnotationRecord, LogEntry, Status, Store, VerifyRequest};

pub struct AppState {
    pub data: Dataset,
    sample_index: HashMap<String, usize>,
    /// Single writer; readers take the same lock briefly.
    pub store: Mutex<Store>,
}

impl AppState {
    pub fn new(data: Dataset, store: Store) -> Self {
        let sample_index = data.samples.iter().enumerate().map(|(i, s)| (s.sample_id.clone(), i)).collect();
        AppState { data, sample_index, store: Mutex::new(store) }
    }

    fn sample(&self, id: &str) -> Option<&GroundingSample> {
        self.sample_index.get(id).map(|&i| &self.data.samples[i])
    }
}

pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
    path: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, kind, message: message.into(), path: None }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError { path: Some(path.into()), ..Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message) }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::State(_) => StatusCode::CONFLICT,
            Error::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"kind": self.kind, "message": self.message});
        if let Some(p) = self.path {
            body["path"] = json!(p);
        }
        let text = canonical_json(&json!({ "error": body })).unwrap_or_default();
        (self.status, [(header::CONTENT_TYPE, "application/json")], text).into_response()
    }
}

type ApiResult = std::result::Result<Response, ApiError>;

fn json_ok<T: Serialize>(value: &T) -> ApiResult {
    Ok(([(header::CONTENT_TYPE, "application/json")], canonical_json(value)?).into_response())
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> std::result::Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError::invalid(if path == "." { String::new() } else { path }, e.inner().to_string())
    })
}

fn lock(state: &AppState) -> std::sync::MutexGuard<'_, Store> {
    state.store.lock().unwrap_or_else(|p| p.into_inner())
}

/// Span checks with the offending field path.
pub fn check_spans(spans: &[PhraseSpan], tokens: usize, objects: usize) -> std::result::Result<(), ApiError> {
    if spans.is_empty() {
        return Err(ApiError::invalid("spans", "at least one span is required"));
    }
    for (i, s) in spans.iter().enumerate() {
        if s.start >= s.end {
            return Err(ApiError::invalid(format!("spans[{i}].end"), format!("end {} must exceed start {}", s.end, s.start)));
        }
        if s.end > tokens {
            return Err(ApiError::invalid(format!("spans[{i}].end"), format!("end {} beyond {tokens} tokens", s.end)));
        }
        if s.object_id >= objects {
            return Err(ApiError::invalid(
                format!("spans[{i}].object_id"),
                format!("object {} not in a scene of {objects}", s.object_id),
            ));
        }
        if let Some(j) = spans[..i].iter().position(|o| o.overlaps(s)) {
            return Err(ApiError::invalid(format!("spans[{i}]"), format!("overlaps spans[{j}]")));
        }
    }
    let targets = spans.iter().filter(|s| s.is_target).count();
    if targets != 1 {
        return Err(ApiError::invalid("spans", format!("exactly one target span required, got {targets}")));
    }
    Ok(())
}

async fn list_scenes(State(st): State<Arc<AppState>>) -> ApiResult {
    json_ok(&st.data.scenes.iter().map(|s| s.scene_id.as_str()).collect::<Vec<_>>())
}

async fn get_scene(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let scene = st.data.scene(&id).ok_or_else(|| ApiError::not_found(format!("unknown scene {id:?}")))?;
    json_ok(scene)
}

async fn next_task(State(st): State<Arc<AppState>>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    let annotator = q
        .get("annotator")
        .filter(|a| !a.is_empty())
        .ok_or_else(|| ApiError::invalid("annotator", "query parameter `annotator` is required"))?;
    let store = lock(&st);
    let task = |s: &GroundingSample, reason: &str| {
        json!({"sample_id": s.sample_id, "scene_id": s.scene_id, "tokens": s.tokens, "reason": reason})
    };
    if let Some(s) = st.data.samples.iter().find(|s| !store.has_record(&s.sample_id, annotator)) {
        return json_ok(&task(s, "new"));
    }
    // Disputed samples come back to their annotators for another pass.
    let disputed = st.data.samples.iter().find(|s| {
        store.state(&s.sample_id).is_some_and(|v| v.status == Status::Disputed)
    });
    match disputed {
        Some(s) => json_ok(&task(s, "disputed")),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

async fn post_annotation(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let rec: AnnotationRecord = parse_body(&body)?;
    if rec.annotator_id.is_empty() {
        return Err(ApiError::invalid("annotator_id", "must be nonempty"));
    }
    let sample = st.sample(&rec.sample_id).ok_or_else(|| ApiError::not_found(format!("unknown sample {:?}", rec.sample_id)))?;
    let objects = st.data.scene(&sample.scene_id).map(|s| s.objects.len()).unwrap_or(0);
    check_spans(&rec.spans, sample.tokens.len(), objects)?;
    lock(&st).append(LogEntry::Annotation(rec.clone()))?;
    json_ok(&rec)
}

async fn get_annotations(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    if st.sample(&id).is_none() {
        return Err(ApiError::not_found(format!("unknown sample {id:?}")));
    }
    let store = lock(&st);
    json_ok(&json!({"records": store.records(&id), "verification": store.state(&id)}))
}

async fn post_verify(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: VerifyRequest = parse_body(&body)?;
    if st.sample(&req.sample_id).is_none() {
        return Err(ApiError::not_found(format!("unknown sample {:?}", req.sample_id)));
    }
    let mut store = lock(&st);
    if store.records(&req.sample_id).is_empty() {
        return Err(ApiError::not_found(format!("sample {:?} has no annotations to verify", req.sample_id)));
    }
    store.append(LogEntry::Verify(req.clone()))?;
    json_ok(&store.state(&req.sample_id))
}

/// Verified samples carrying the agreed spans, one canonical JSON line
/// each. Samples with an unsure record go to the review export instead.
pub fn export_lines(state: &AppState) -> Result<String, Error> {
    let store = lock(state);
    let mut out = String::new();
    for s in &state.data.samples {
        let verified = store.state(&s.sample_id).is_some_and(|v| v.status == Status::Verified);
        if !verified || store.is_unsure(&s.sample_id) {
            continue;
        }
        let recs = store.records(&s.sample_id);
        let Some(first) = recs.first() else { continue };
        let phrases = span_set(&first.spans);
        let target_id = phrases
            .iter()
            .find(|p| p.is_target)
            .map(|p| p.object_id)
            .ok_or_else(|| Error::Validation(format!("{}: agreed spans lack a target", s.sample_id)))?;
        let merged = GroundingSample { target_id, phrases, ..s.clone() };
        merged.validate()?;
        if let Some(scene) = state.data.scene(&s.scene_id) {
            merged.validate_against(scene)?;
        }
        out.push_str(&canonical_json(&merged)?);
        out.push('\n');
    }
    Ok(out)
}

fn jsonl(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}

async fn export(State(st): State<Arc<AppState>>) -> ApiResult {
    Ok(jsonl(export_lines(&st)?))
}

async fn export_review(State(st): State<Arc<AppState>>) -> ApiResult {
    let store = lock(&st);
    let mut out = String::new();
    for r in store.unsure_records() {
        out.push_str(&canonical_json(r)?);
        out.push('\n');
    }
    Ok(jsonl(out))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/scenes", get(list_scenes))
        .route("/api/scenes/{id}", get(get_scene))
        .route("/api/tasks", get(next_task))
        .route("/api/annotations", post(post_annotation))
        .route("/api/annotations/{sample_id}", get(get_annotations))
        .route("/api/verify", post(post_verify))
        .route("/api/export", get(export))
        .route("/api/export/review", get(export_review))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    axum::serve(listener, router(state)).await
}
