//! HTTP front end for interactive sessions.
//!
//! Each session lives in memory behind a per-session busy flag: a query,
//! a submitted correction and the refit that follows it all hold the flag,
//! and a request that finds it taken gets `409`. Reads (`report`, the
//! handle) come from a snapshot refreshed after every mutation. Every
//! session persists into `state_dir/<id>` (write-ahead feedback log plus a
//! checkpoint per refit), so `POST /sessions` with a known id resumes it.

mod archive;
pub mod config;
pub mod wire;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use xil_core::data::Dataset;
use xil_core::experiment::probe_heatmaps;
use xil_core::feedback::{Correction, FeedbackError};
use xil_core::models::Model;
use xil_core::session::{LoopError, MetricsPoint, Session, SessionState};
use xil_core::spray::{run_spray_records, SprayConfig};

pub use config::{ConfigError, ServiceConfig};
pub use wire::*;

/// An error response: status plus a short machine-readable code.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn unknown(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "UnknownSession", format!("no session {id:?}"))
    }

    fn wrong_state(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "WrongState", message)
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message.to_string())
    }
}

impl From<LoopError> for ApiError {
    fn from(e: LoopError) -> Self {
        let msg = e.to_string();
        match e {
            LoopError::WrongState(_) | LoopError::EmptyPool => Self::wrong_state(msg),
            LoopError::Feedback(FeedbackError::InvalidComponent { .. }) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidComponents", msg)
            }
            LoopError::BadLabel { .. } | LoopError::InstanceMismatch { .. } | LoopError::UnknownInstance(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidFeedback", msg)
            }
            LoopError::InvalidConfig(_) | LoopError::Data(_) => Self::new(StatusCode::BAD_REQUEST, "BadManifest", msg),
            _ => Self::internal(msg),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code.into(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Immutable view of a session, swapped after every mutation.
#[derive(Clone)]
struct Snapshot {
    state: WireState,
    step: usize,
    budget: usize,
    query: Option<WireQuery>,
    metrics: Vec<MetricsPoint>,
    model: Arc<Model>,
    error: Option<String>,
}

impl Snapshot {
    fn of(s: &Session) -> Self {
        Self {
            state: match s.state() {
                SessionState::Idle => WireState::Idle,
                SessionState::AwaitingFeedback => WireState::AwaitingFeedback,
                SessionState::Done => WireState::Done,
            },
            step: s.step(),
            budget: s.budget(),
            query: s.pending().map(|q| WireQuery::new(q, s.scheme())),
            metrics: s.metrics().to_vec(),
            model: Arc::new(s.model().clone()),
            error: None,
        }
    }
}

struct Entry {
    id: String,
    dir: PathBuf,
    session: Mutex<Session>,
    busy: AtomicBool,
    snapshot: RwLock<Snapshot>,
    test: Arc<Dataset>,
    probe: usize,
    spray: SprayConfig,
    touched: Mutex<Instant>,
    resumed: bool,
}

/// Clears the busy flag when dropped.
struct Busy(Arc<Entry>);

impl Drop for Busy {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::Release);
    }
}

impl Entry {
    fn claim(self: &Arc<Self>) -> ApiResult<Busy> {
        self.touch();
        self.busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| Busy(self.clone()))
            .map_err(|_| ApiError::wrong_state("session is busy (training or answering another request)"))
    }

    fn touch(&self) {
        *self.touched.lock().unwrap() = Instant::now();
    }

    fn snapshot(&self) -> Snapshot {
        self.snapshot.read().unwrap().clone()
    }

    fn refresh(&self, session: &Session) {
        *self.snapshot.write().unwrap() = Snapshot::of(session);
    }

    fn handle(&self) -> SessionHandle {
        let s = self.snapshot();
        SessionHandle {
            schema_version: SCHEMA_VERSION,
            id: self.id.clone(),
            state: s.state,
            step: s.step,
            budget: s.budget,
            query: s.query,
            resumed: self.resumed,
            error: s.error,
        }
    }
}

/// Shared server state.
#[derive(Clone)]
pub struct AppState {
    config: Arc<ServiceConfig>,
    sessions: Arc<Mutex<HashMap<String, Arc<Entry>>>>,
    /// Ids with a create in flight.
    creating: Arc<Mutex<std::collections::HashSet<String>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            config: Arc::new(config),
            sessions: Arc::default(),
            creating: Arc::default(),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn get(&self, id: &str) -> ApiResult<Arc<Entry>> {
        self.sessions.lock().unwrap().get(id).cloned().ok_or_else(|| ApiError::unknown(id))
    }

    /// Drops sessions idle for longer than the TTL. Returns how many went.
    pub fn evict_idle(&self) -> usize {
        let ttl = Duration::from_secs(self.config.session_ttl_secs);
        let mut map = self.sessions.lock().unwrap();
        let before = map.len();
        map.retain(|_, e| e.busy.load(Ordering::Acquire) || e.touched.lock().unwrap().elapsed() < ttl);
        before - map.len()
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)
}

fn open_session(
    config: &ServiceConfig,
    dir: &Path,
    req: &CreateSession,
) -> ApiResult<(Session, bool)> {
    if dir.join("session.json").exists() {
        let s = Session::resume(dir)?;
        return Ok((s, true));
    }
    let seed = req.seed.or_else(|| req.manifest.seeds.first().copied()).unwrap_or(0);
    let spec = req
        .manifest
        .session_spec(seed, &config.data_root)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadManifest", e.to_string()))?;
    let mut s = Session::start(spec, config.data_root.clone())?;
    s.persist_to(dir)?;
    Ok((s, false))
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionHandle>)> {
    let req: CreateSession =
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadManifest", e.to_string()))?;
    req.manifest
        .validate()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadManifest", e.to_string()))?;
    let id = req.id.clone().unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
    if !valid_id(&id) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "BadId", format!("invalid session id {id:?}")));
    }
    {
        let sessions = app.sessions.lock().unwrap();
        let mut creating = app.creating.lock().unwrap();
        if sessions.contains_key(&id) || !creating.insert(id.clone()) {
            return Err(ApiError::new(StatusCode::CONFLICT, "DuplicateId", format!("session {id:?} exists")));
        }
    }
    let dir = app.config.state_dir.join(&id);
    let config = app.config.clone();
    let opened = blocking(move || open_session(&config, &dir, &req).map(|(s, r)| (s, r, dir, req))).await;
    let result = opened.and_then(|r| r).map(|(session, resumed, dir, req)| {
        let snapshot = Snapshot::of(&session);
        Arc::new(Entry {
            id: id.clone(),
            dir,
            test: Arc::new(session.test_set().clone()),
            session: Mutex::new(session),
            busy: AtomicBool::new(false),
            snapshot: RwLock::new(snapshot),
            probe: req.manifest.probe,
            spray: req.manifest.spray,
            touched: Mutex::new(Instant::now()),
            resumed,
        })
    });
    let entry = {
        let mut sessions = app.sessions.lock().unwrap();
        app.creating.lock().unwrap().remove(&id);
        let entry = result?;
        sessions.insert(id.clone(), entry.clone());
        entry
    };
    log::info!("session {id} {}", if entry.resumed { "resumed" } else { "started" });
    Ok((StatusCode::CREATED, Json(entry.handle())))
}

async fn get_handle(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionHandle>> {
    let e = app.get(&id)?;
    e.touch();
    Ok(Json(e.handle()))
}

async fn next_query(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<WireQuery>> {
    let entry = app.get(&id)?;
    let busy = entry.claim()?;
    let state = entry.snapshot().state;
    if state != WireState::Idle {
        return Err(ApiError::wrong_state(format!("session is {state:?}, not idle")));
    }
    blocking(move || {
        let entry = &busy.0;
        let mut s = entry.session.lock().unwrap();
        let q = s.next_query()?;
        let wire = WireQuery::new(&q, s.scheme());
        entry.refresh(&s);
        Ok(Json(wire))
    })
    .await?
}

#[derive(Debug, Default, Deserialize)]
struct FeedbackParams {
    /// Block until the refit has finished.
    #[serde(default)]
    wait: bool,
}

async fn submit_feedback(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(params): Query<FeedbackParams>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<FeedbackResponse>)> {
    let entry = app.get(&id)?;
    let body: FeedbackBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadFeedback", e.to_string()))?;
    let busy = entry.claim()?;
    let snap = entry.snapshot();
    let pending = match (&snap.state, &snap.query) {
        (WireState::AwaitingFeedback, Some(q)) => q.instance_id,
        (state, _) => return Err(ApiError::wrong_state(format!("session is {state:?}, not awaiting feedback"))),
    };
    let correction = Correction::new(body.instance_id.unwrap_or(pending), body.label, body.marked_components);

    // validate and log synchronously so errors reach this response
    let busy = blocking(move || {
        let entry = busy.0.clone();
        let mut s = entry.session.lock().unwrap();
        s.accept(&correction)?;
        drop(s);
        let mut snap = entry.snapshot.write().unwrap();
        snap.state = WireState::Training;
        snap.query = None;
        snap.step += 1;
        drop(snap);
        Ok::<_, ApiError>(busy)
    })
    .await??;

    let entry2 = entry.clone();
    let refit = tokio::task::spawn_blocking(move || {
        let _busy = busy;
        let mut s = entry2.session.lock().unwrap();
        match s.complete_step() {
            Ok(_) => entry2.refresh(&s),
            Err(e) => {
                log::error!("session {}: refit failed: {e}", entry2.id);
                let mut snap = entry2.snapshot.write().unwrap();
                snap.state = WireState::Failed;
                snap.error = Some(e.to_string());
            }
        }
    });
    if params.wait {
        refit.await.map_err(ApiError::internal)?;
        let snap = entry.snapshot();
        if let Some(err) = snap.error {
            return Err(ApiError::internal(err));
        }
        return Ok((
            StatusCode::OK,
            Json(FeedbackResponse {
                schema_version: SCHEMA_VERSION,
                state: snap.state,
                step: snap.step,
                budget: snap.budget,
                metrics: snap.metrics.last().copied(),
            }),
        ));
    }
    let snap = entry.snapshot();
    Ok((
        StatusCode::ACCEPTED,
        Json(FeedbackResponse {
            schema_version: SCHEMA_VERSION,
            state: WireState::Training,
            step: snap.step,
            budget: snap.budget,
            metrics: snap.metrics.last().copied(),
        }),
    ))
}

#[derive(Debug, Default, Deserialize)]
struct ReportParams {
    /// Also cluster heatmaps of the probe set under the current model.
    #[serde(default)]
    spray: bool,
    /// `json` (default) or `csv` (metrics only).
    #[serde(default)]
    format: Option<String>,
}

async fn report(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(params): Query<ReportParams>,
) -> ApiResult<Response> {
    let entry = app.get(&id)?;
    entry.touch();
    let handle = entry.handle();
    let snap = entry.snapshot();
    if params.format.as_deref() == Some("csv") {
        let mut w = csv::Writer::from_writer(Vec::new());
        for m in &snap.metrics {
            w.serialize(m).map_err(ApiError::internal)?;
        }
        let bytes = w.into_inner().map_err(ApiError::internal)?;
        return Ok(([(header::CONTENT_TYPE, "text/csv")], bytes).into_response());
    }
    let clusters = if params.spray {
        let (model, test, probe, config) = (snap.model.clone(), entry.test.clone(), entry.probe, entry.spray);
        let r = blocking(move || {
            let records = probe_heatmaps(&model, &test, probe).map_err(|e| e.to_string())?;
            run_spray_records(&records, &config).map_err(|e| e.to_string())
        })
        .await?
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "SprayFailed", e))?;
        Some(r)
    } else {
        None
    };
    Ok(Json(Report {
        schema_version: SCHEMA_VERSION,
        id,
        state: handle.state,
        step: snap.step,
        budget: snap.budget,
        metrics: snap.metrics,
        clusters,
    })
    .into_response())
}

async fn export(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let entry = app.get(&id)?;
    let busy = entry.claim()?;
    let bytes = blocking(move || archive::tar_gz(&busy.0.dir, &busy.0.id)).await?.map_err(ApiError::internal)?;
    let disposition = format!("attachment; filename=\"{id}.tar.gz\"");
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("application/gzip")),
            (
                header::CONTENT_DISPOSITION,
                HeaderValue::from_str(&disposition).map_err(ApiError::internal)?,
            ),
        ],
        bytes,
    )
        .into_response())
}

fn cors(config: &ServiceConfig) -> CorsLayer {
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    match config.cors_origin.as_deref().and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(origin) => layer.allow_origin(AllowOrigin::exact(origin)),
        None => layer.allow_origin(Any),
    }
}

pub fn router(app: AppState) -> Router {
    let cors = cors(&app.config);
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_handle))
        .route("/sessions/{id}/query", get(next_query))
        .route("/sessions/{id}/feedback", post(submit_feedback))
        .route("/sessions/{id}/report", get(report))
        .route("/sessions/{id}/export", get(export))
        .layer(cors)
        .with_state(app)
}

/// Binds `config.listen` and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    std::fs::create_dir_all(&config.state_dir)?;
    let listener = tokio::net::TcpListener::bind(config.listen).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let app = AppState::new(config);
    let reaper = app.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(30));
        loop {
            tick.tick().await;
            let n = reaper.evict_idle();
            if n > 0 {
                log::info!("evicted {n} idle sessions");
            }
        }
    });
    axum::serve(listener, router(app)).await
}
