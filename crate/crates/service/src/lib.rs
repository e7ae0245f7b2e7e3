//! HTTP session service for human-in-the-loop GA fitting, clarity-preference
//! and MUSHRA tests.
//!
//! [`AppState`] holds the sessions and the stimulus store and can be driven
//! directly; [`router`] exposes it over HTTP.

pub mod session;
pub mod stimuli;

use std::collections::HashMap;
use std::fmt;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use sce_core::protocols::TrialLogRecord;
use session::{Ctx, Session, SessionKind};
use stimuli::{StimulusInfo, StimulusStore};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Idle time after which a session counts as abandoned.
pub const SESSION_TTL: Duration = Duration::from_secs(2 * 60 * 60);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: u16,
    pub message: String,
}

impl ApiError {
    fn new(status: u16, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    pub fn not_found(m: impl Into<String>) -> Self {
        Self::new(404, m)
    }

    pub fn conflict(m: impl Into<String>) -> Self {
        Self::new(409, m)
    }

    pub fn gone(m: impl Into<String>) -> Self {
        Self::new(410, m)
    }

    pub fn unprocessable(m: impl Into<String>) -> Self {
        Self::new(422, m)
    }

    pub fn internal(m: impl Into<String>) -> Self {
        Self::new(500, m)
    }
}

impl fmt::Display for ApiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.status, self.message)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Root for WAV paths named in session configs.
    pub stimulus_dir: PathBuf,
    /// Where per-session JSON-lines logs go, if anywhere.
    pub log_dir: Option<PathBuf>,
    pub session_ttl: Duration,
    pub sample_rate_hz: u32,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            stimulus_dir: PathBuf::from("."),
            log_dir: None,
            session_ttl: SESSION_TTL,
            sample_rate_hz: sce_core::audio::DEFAULT_SAMPLE_RATE,
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub kind: SessionKind,
    #[serde(default)]
    pub config: Value,
}

#[derive(Debug, Deserialize)]
pub struct ResponseBody {
    pub trial_id: String,
    pub answer: Value,
}

pub struct AppState {
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    store: StimulusStore,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            config,
            sessions: Mutex::new(HashMap::new()),
            store: StimulusStore::default(),
            next_id: AtomicU64::new(1),
        })
    }

    fn ctx(&self) -> Ctx<'_> {
        Ctx {
            stimulus_dir: &self.config.stimulus_dir,
            sample_rate_hz: self.config.sample_rate_hz,
            store: &self.store,
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let s = self
            .sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))?;
        s.lock()
            .expect("session poisoned")
            .check_expiry(self.config.session_ttl);
        Ok(s)
    }

    pub fn create_session(&self, req: CreateSession) -> Result<Value, ApiError> {
        let id = format!("s{:06}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let log_path = self.config.log_dir.as_ref().map(|d| d.join(format!("{id}.jsonl")));
        let session = Session::create(id.clone(), req.kind, req.config, &self.ctx(), log_path)?;
        let state = session.state();
        self.sessions
            .lock()
            .expect("session table poisoned")
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(json!({ "id": id, "kind": req.kind, "state": state }))
    }

    pub fn trial(&self, id: &str) -> Result<Value, ApiError> {
        let s = self.session(id)?;
        let mut s = s.lock().expect("session poisoned");
        let trial = s.current_trial(&self.ctx())?;
        Ok(json!({
            "finished": trial.is_none(),
            "state": s.state(),
            "trial": trial,
        }))
    }

    pub fn respond(&self, id: &str, body: ResponseBody) -> Result<Value, ApiError> {
        let s = self.session(id)?;
        let mut s = s.lock().expect("session poisoned");
        s.respond(&body.trial_id, body.answer, &self.ctx())
    }

    pub fn results(&self, id: &str) -> Result<Value, ApiError> {
        let s = self.session(id)?;
        let s = s.lock().expect("session poisoned");
        s.results()
    }

    pub fn stimulus_wav(&self, token: &str) -> Option<Arc<Vec<u8>>> {
        self.store.wav(token)
    }

    /// What a token was rendered from; for tests and audits, not served.
    pub fn stimulus_info(&self, token: &str) -> Option<StimulusInfo> {
        self.store.info(token)
    }

    pub fn session_log(&self, id: &str) -> Result<Vec<TrialLogRecord>, ApiError> {
        let s = self.session(id)?;
        let s = s.lock().expect("session poisoned");
        Ok(s.log().to_vec())
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok", "version": VERSION }))
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, axum::extract::rejection::JsonRejection>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let Json(req) = body.map_err(|e| ApiError::unprocessable(e.body_text()))?;
    let v = blocking(move || st.create_session(req)).await?;
    Ok((StatusCode::CREATED, Json(v)))
}

async fn get_trial(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    Ok(Json(blocking(move || st.trial(&id)).await?))
}

async fn post_response(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<ResponseBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::unprocessable(e.body_text()))?;
    Ok(Json(blocking(move || st.respond(&id, req)).await?))
}

async fn get_results(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    Ok(Json(blocking(move || st.results(&id)).await?))
}

async fn get_stimulus(State(st): State<Arc<AppState>>, Path(token): Path<String>) -> Result<Response, ApiError> {
    let wav = st
        .stimulus_wav(&token)
        .ok_or_else(|| ApiError::not_found(format!("no stimulus {token}")))?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], wav.as_ref().clone()).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/trial", get(get_trial))
        .route("/sessions/{id}/response", post(post_response))
        .route("/sessions/{id}/results", get(get_results))
        .route("/stimuli/{token}", get(get_stimulus))
        .with_state(state)
}

/// Binds `addr`; fails if the port is already taken.
pub async fn bind(addr: SocketAddr) -> std::io::Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr).await
}

/// Serves until the listener fails or the process is interrupted.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
