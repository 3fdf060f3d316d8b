//! HTTP+JSON chat service.
//!
//! Sessions live in memory. Requests for different sessions run
//! concurrently; requests for one session are serialized by a per-session
//! lock held for the whole request. Model inference runs on the blocking
//! pool. Errors are `{error, detail}` bodies with a matching status.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ccrs_core::engine::{ChatResponse, EntityInfo, EntityRef, Engine, ModelSummary, RecommendedItem, Session, SessionOptions, SessionView, ANONYMOUS};
use ccrs_core::CcrsError;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

const DEFAULT_K: usize = 10;
const MAX_K: usize = 1000;
const AUTOCOMPLETE_LIMIT: usize = 20;

#[derive(Clone, Debug, Default)]
pub struct ServiceConfig {
    /// Origins allowed to call the API from a browser; `*` allows any.
    pub allowed_origins: Vec<String>,
    /// Directory for one JSON-lines log per session.
    pub log_dir: Option<PathBuf>,
}

type SessionSlot = Arc<tokio::sync::Mutex<Session>>;

pub struct AppState {
    engine: Option<Arc<Engine>>,
    sessions: Mutex<HashMap<String, SessionSlot>>,
    config: ServiceConfig,
}

impl AppState {
    /// `engine` is `None` when no model could be loaded; the service then
    /// reports itself degraded and refuses chat requests.
    pub fn new(engine: Option<Engine>, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self { engine: engine.map(Arc::new), sessions: Mutex::new(HashMap::new()), config })
    }

    fn engine(&self) -> Result<Arc<Engine>, ApiError> {
        self.engine.clone().ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_model", "no model is loaded"))
    }

    fn session(&self, id: &str) -> Result<SessionSlot, ApiError> {
        self.sessions
            .lock()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id:?}")))
    }

    fn log(&self, session_id: &str, event: serde_json::Value) {
        let Some(dir) = &self.config.log_dir else { return };
        let path = dir.join(format!("{session_id}.jsonl"));
        let written = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| writeln!(f, "{event}"));
        if let Err(e) = written {
            log::warn!("could not write session log {}: {e}", path.display());
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    pub error: String,
    pub detail: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, detail: impl Into<String>) -> Self {
        Self { status, error: error.to_string(), detail: detail.into() }
    }
}

impl From<CcrsError> for ApiError {
    fn from(e: CcrsError) -> Self {
        let detail = e.to_string();
        match e {
            CcrsError::UnknownEntity(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "unknown_entity", detail),
            CcrsError::Io { .. } | CcrsError::NonFiniteGradient { .. } | CcrsError::Checkpoint(_) => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", detail)
            }
            _ => ApiError::new(StatusCode::BAD_REQUEST, "bad_request", detail),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct CreateSession {
    pub user_id: Option<String>,
    pub adapt: bool,
    pub trace: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub user_id: String,
    pub adapted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let engine = state.engine()?;
    let req: CreateSession = if body.iter().all(u8::is_ascii_whitespace) {
        CreateSession::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))?
    };
    let user_id = req.user_id.unwrap_or_else(|| ANONYMOUS.to_string());
    let options = SessionOptions { adapt: req.adapt, trace: req.trace };
    let session = blocking(move || Ok(engine.create_session(&user_id, options)?)).await?;
    let out = SessionCreated {
        session_id: session.session_id.clone(),
        user_id: session.user_id.clone(),
        adapted: session.is_adapted(),
        warning: session.warning.clone(),
    };
    state.log(&out.session_id, serde_json::json!({"event": "create", "session": &out}));
    state
        .sessions
        .lock()
        .expect("session table lock")
        .insert(session.session_id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(out)))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<SessionView> {
    let slot = state.session(&id)?;
    let session = slot.lock().await;
    Ok(Json(SessionView::from(&*session)))
}

#[derive(Debug, Deserialize, Serialize)]
pub struct PostMessage {
    pub text: String,
    #[serde(default)]
    pub entities: Vec<EntityRef>,
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<PostMessage>,
) -> ApiResult<ChatResponse> {
    let engine = state.engine()?;
    let slot = state.session(&id)?;
    if req.text.trim().is_empty() && req.entities.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "message text is empty"));
    }
    let mut session = slot.lock_owned().await;
    let (text, entities) = (req.text.clone(), req.entities.clone());
    let response = blocking(move || Ok(engine.post_message(&mut session, &text, &entities)?)).await?;
    state.log(&id, serde_json::json!({"event": "message", "request": &req, "response": &response}));
    Ok(Json(response))
}

#[derive(Debug, Deserialize)]
pub struct RecQuery {
    pub k: Option<usize>,
    #[serde(default)]
    pub exclude_recommended: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Recommendations {
    pub session_id: String,
    pub items: Vec<RecommendedItem>,
}

async fn recommendations(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<RecQuery>,
) -> ApiResult<Recommendations> {
    let engine = state.engine()?;
    let slot = state.session(&id)?;
    let k = q.k.unwrap_or(DEFAULT_K);
    if k == 0 || k > MAX_K {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", format!("k must be in 1..={MAX_K}")));
    }
    let mut session = slot.lock_owned().await;
    let items = blocking(move || Ok(engine.recommendations(&mut session, k, q.exclude_recommended)?)).await?;
    Ok(Json(Recommendations { session_id: id, items }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelSummary>,
    pub sessions: usize,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let sessions = state.sessions.lock().expect("session table lock").len();
    Json(match &state.engine {
        Some(e) => Health {
            status: "ok".into(),
            checksum: Some(e.checksum().to_string()),
            config: Some(e.summary()),
            sessions,
        },
        None => Health { status: "degraded".into(), checksum: None, config: None, sessions },
    })
}

#[derive(Debug, Deserialize)]
pub struct EntityQuery {
    #[serde(default)]
    pub prefix: String,
    pub limit: Option<usize>,
}

async fn entities(State(state): State<Arc<AppState>>, Query(q): Query<EntityQuery>) -> ApiResult<Vec<EntityInfo>> {
    let engine = state.engine()?;
    Ok(Json(engine.autocomplete(&q.prefix, q.limit.unwrap_or(AUTOCOMPLETE_LIMIT).min(MAX_K))))
}

fn cors(origins: &[String]) -> Option<CorsLayer> {
    if origins.is_empty() {
        return None;
    }
    let layer = CorsLayer::new().allow_methods([Method::GET, Method::POST]).allow_headers(Any);
    if origins.iter().any(|o| o == "*") {
        return Some(layer.allow_origin(Any));
    }
    let list: Vec<HeaderValue> = origins.iter().filter_map(|o| o.parse().ok()).collect();
    Some(layer.allow_origin(AllowOrigin::list(list)))
}

pub fn router(state: Arc<AppState>) -> Router {
    let origins = state.config.allowed_origins.clone();
    let app = Router::new()
        .route("/api/health", get(health))
        .route("/api/entities", get(entities))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/messages", post(post_message))
        .route("/api/sessions/{id}/recommendations", get(recommendations))
        .with_state(state);
    match cors(&origins) {
        Some(layer) => app.layer(layer),
        None => app,
    }
}

/// Serves until `shutdown` resolves; in-flight requests are completed.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
