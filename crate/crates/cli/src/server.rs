//! The `/v1` HTTP API.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

use umivr_core::embedder::TextEmbedder;
use umivr_core::embedding_store::{EmbeddingIndex, VideoRecord};
use umivr_core::llm_gateway::Gateway;
use umivr_core::session::{Engine, SessionConfig, SessionState, SessionStatus, SessionStore};

use crate::error::{AppError, ErrorKind};
use crate::ingest::add_records;

pub struct AppState {
    index: RwLock<Arc<EmbeddingIndex>>,
    index_path: PathBuf,
    embedder: Arc<dyn TextEmbedder>,
    gateway: Arc<Gateway>,
    store: SessionStore,
    defaults: SessionConfig,
    session_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    ingest_lock: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn new(
        index: EmbeddingIndex,
        index_path: PathBuf,
        embedder: Arc<dyn TextEmbedder>,
        gateway: Arc<Gateway>,
        store: SessionStore,
        defaults: SessionConfig,
    ) -> Self {
        Self {
            index: RwLock::new(Arc::new(index)),
            index_path,
            embedder,
            gateway,
            store,
            defaults,
            session_locks: Mutex::new(HashMap::new()),
            ingest_lock: tokio::sync::Mutex::new(()),
        }
    }

    pub fn index(&self) -> Arc<EmbeddingIndex> {
        Arc::clone(&self.index.read().expect("index lock"))
    }

    fn engine(&self) -> Engine {
        Engine::new(self.index(), Arc::clone(&self.embedder), Arc::clone(&self.gateway))
    }

    fn session_lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.session_locks.lock().expect("session lock table");
        Arc::clone(locks.entry(id.to_string()).or_default())
    }
}

pub fn router(state: Arc<AppState>, cors_origins: &[String]) -> Router {
    let origins: Vec<HeaderValue> = cors_origins.iter().filter_map(|o| o.parse().ok()).collect();
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::list(origins))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/search", get(search))
        .route("/v1/ingest", post(ingest))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/answer", post(answer))
        .route("/v1/sessions/{id}/finish", post(finish))
        .fallback(|| async { AppError::new(ErrorKind::NotFound, "no_route", "no such endpoint") })
        .layer(cors)
        .with_state(state)
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, AppError> {
    serde_json::from_slice(body).map_err(|e| AppError::validation("invalid_request", e.to_string()))
}

async fn blocking<T, F>(f: F) -> Result<T, AppError>
where
    F: FnOnce() -> Result<T, AppError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| AppError::new(ErrorKind::Internal, "task_failed", e.to_string()))?
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    let index = state.index();
    Json(json!({ "status": "ok", "videos": index.len(), "dim": index.dim() }))
}

#[derive(Debug, Deserialize)]
struct SearchParams {
    q: String,
    k: Option<usize>,
}

async fn search(
    State(state): State<Arc<AppState>>,
    params: Result<Query<SearchParams>, QueryRejection>,
) -> Result<impl IntoResponse, AppError> {
    let Query(params) = params.map_err(|e| AppError::validation("invalid_request", e.body_text()))?;
    let k = params.k.unwrap_or(state.defaults.display_k);
    let engine = state.engine();
    let config = state.defaults.clone();
    let result = blocking(move || Ok(engine.search(&params.q, k, &config)?)).await?;
    Ok(Json(result))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestRequest {
    records: Vec<VideoRecord>,
}

async fn ingest(State(state): State<Arc<AppState>>, body: Bytes) -> Result<impl IntoResponse, AppError> {
    let req: IngestRequest = parse_body(&body)?;
    let _guard = state.ingest_lock.lock().await;
    let count = req.records.len();
    let st = Arc::clone(&state);
    let index = blocking(move || {
        let next = add_records(&st.index(), st.embedder.as_ref(), req.records)?;
        next.persist(&st.index_path)?;
        Ok(next)
    })
    .await?;
    let total = index.len();
    *state.index.write().expect("index lock") = Arc::new(index);
    Ok((StatusCode::CREATED, Json(json!({ "ingested": count, "total": total }))))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    query: String,
    #[serde(default)]
    config: Option<Value>,
    #[serde(default)]
    target_id: Option<String>,
}

#[derive(Debug, Serialize)]
struct Created {
    session_id: String,
    state: SessionState,
}

/// `overrides` merged key by key onto `base`, descending into objects.
fn merge(base: &mut Value, overrides: Value) {
    match (base, overrides) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn session_config(defaults: &SessionConfig, overrides: Option<Value>) -> Result<SessionConfig, AppError> {
    let Some(overrides) = overrides else {
        return Ok(defaults.clone());
    };
    if !overrides.is_object() {
        return Err(AppError::validation("invalid_config", "config must be an object"));
    }
    let mut v = serde_json::to_value(defaults).expect("config serializes");
    merge(&mut v, overrides);
    serde_json::from_value(v).map_err(|e| AppError::validation("invalid_config", e.to_string()))
}

/// Asks the next question when the session is still open.
fn with_question(engine: &Engine, s: SessionState) -> Result<SessionState, AppError> {
    if s.status == SessionStatus::AwaitingAnswer {
        Ok(engine.question(&s)?)
    } else {
        Ok(s)
    }
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<impl IntoResponse, AppError> {
    let req: CreateSession = parse_body(&body)?;
    let config = session_config(&state.defaults, req.config)?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let st = Arc::clone(&state);
    let s = blocking(move || {
        let engine = st.engine();
        let s = engine.start(id, config, &req.query, req.target_id.as_deref())?;
        let s = with_question(&engine, s)?;
        st.store.save(&s)?;
        Ok(s)
    })
    .await?;
    Ok(Json(Created { session_id: s.session_id.clone(), state: s }))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<impl IntoResponse, AppError> {
    let s = blocking(move || Ok(state.store.load(&id)?)).await?;
    Ok(Json(s))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnswerRequest {
    #[serde(default)]
    answer: Option<String>,
}

/// Loads the session under its lock, applies `op`, and saves the result.
/// A second request for the same session while one is running gets 409.
async fn mutate<F>(state: Arc<AppState>, id: String, op: F) -> Result<SessionState, AppError>
where
    F: FnOnce(&Engine, SessionState) -> Result<SessionState, AppError> + Send + 'static,
{
    let lock = state.session_lock(&id);
    let _guard = lock
        .try_lock_owned()
        .map_err(|_| AppError::new(ErrorKind::Conflict, "session_busy", format!("session {id:?} is busy")))?;
    blocking(move || {
        let current = state.store.load(&id)?;
        let engine = state.engine();
        let next = op(&engine, current)?;
        state.store.save(&next)?;
        Ok(next)
    })
    .await
}

async fn answer(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<impl IntoResponse, AppError> {
    let req: AnswerRequest = if body.is_empty() { AnswerRequest::default() } else { parse_body(&body)? };
    let s = mutate(state, id, move |engine, s| {
        let next = engine.answer(&s, req.answer.as_deref())?;
        with_question(engine, next)
    })
    .await?;
    Ok(Json(s))
}

async fn finish(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<impl IntoResponse, AppError> {
    let s = mutate(state, id, |engine, s| Ok(engine.finish(&s)?)).await?;
    Ok(Json(s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_descends_into_objects() {
        let mut base = json!({ "alpha": 0.5, "tas": { "gamma": 0.5, "t0": 8.0 } });
        merge(&mut base, json!({ "tas": { "gamma": 1.0 }, "beta": 0.1 }));
        assert_eq!(base, json!({ "alpha": 0.5, "beta": 0.1, "tas": { "gamma": 1.0, "t0": 8.0 } }));
    }

    #[test]
    fn config_overrides() {
        let d = SessionConfig::default();
        assert_eq!(session_config(&d, None).unwrap(), d);
        let c = session_config(&d, Some(json!({ "max_rounds": 3, "early_stop": true }))).unwrap();
        assert_eq!((c.max_rounds, c.early_stop, c.alpha), (3, true, d.alpha));
        assert_eq!(session_config(&d, Some(json!({ "nope": 1 }))).unwrap_err().code, "invalid_config");
        assert_eq!(session_config(&d, Some(json!([1]))).unwrap_err().code, "invalid_config");
    }
}
