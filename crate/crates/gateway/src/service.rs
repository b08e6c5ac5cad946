//! Local editing service consumed by the browser editor.
//!
//! Buffers are computed once at startup. The edit state lives behind a
//! read-mostly lock holding an immutable snapshot; every write (PUT, solve)
//! goes through one async mutex, persists the document, swaps the snapshot,
//! and broadcasts a `state-changed` event to WebSocket clients.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use splatgrade::editing::{compose_edited, solve_constraints, CurvePin, EditState, PixelConstraint, SolveOutcome, SolverConfig};
use splatgrade::formats::{buffers_from_bytes, buffers_to_bytes, edit_state_from_json};
use splatgrade::rasterizer::{splat, ViewBuffers};
use splatgrade::scene::Camera;
use tokio::sync::{broadcast, Mutex};

use crate::commands::{LoadedScene, EVAL_STRIDE};
use crate::images::encode_png;
use crate::{GatewayError, Result};

pub const DEFAULT_PORT: u16 = 7331;

/// The current edit document and its revision counter.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub revision: u64,
    pub state: Arc<EditState>,
}

pub struct AppState {
    cameras: Vec<Camera>,
    buffers: Arc<Vec<ViewBuffers>>,
    buffer_bytes: Vec<Bytes>,
    current: RwLock<Snapshot>,
    writer: Mutex<()>,
    state_path: Option<PathBuf>,
    events: broadcast::Sender<String>,
}

impl AppState {
    /// Splats every view. A persisted state at `state_path` is reused when it
    /// is valid for this scene; otherwise editing starts from identity.
    pub fn new(scene: &LoadedScene, cameras: Vec<Camera>, state_path: Option<PathBuf>) -> Result<Arc<Self>> {
        let mut buffers = Vec::with_capacity(cameras.len());
        let mut buffer_bytes = Vec::with_capacity(cameras.len());
        for cam in &cameras {
            let bytes = buffers_to_bytes(&splat(&scene.file.cloud, cam)?);
            buffers.push(buffers_from_bytes(&bytes)?);
            buffer_bytes.push(Bytes::from(bytes));
        }
        let sizes: Vec<_> = cameras.iter().map(|c| (c.width, c.height)).collect();
        let k = scene.palette.k();
        let persisted = state_path
            .as_deref()
            .filter(|p| p.is_file())
            .and_then(|p| fs::read_to_string(p).ok())
            .and_then(|text| edit_state_from_json(&text).ok())
            .filter(|s| s.k() == k && s.validate_views(&sizes).is_ok());
        let state = persisted.unwrap_or_else(|| EditState::identity(scene.palette.clone()));
        let (events, _) = broadcast::channel(64);
        Ok(Arc::new(Self {
            cameras,
            buffers: Arc::new(buffers),
            buffer_bytes,
            current: RwLock::new(Snapshot { revision: 0, state: Arc::new(state) }),
            writer: Mutex::new(()),
            state_path,
            events,
        }))
    }

    pub fn snapshot(&self) -> Snapshot {
        self.current.read().expect("state lock poisoned").clone()
    }

    fn view(&self, view: usize) -> Result<usize, ApiError> {
        if view < self.cameras.len() {
            Ok(view)
        } else {
            Err(ApiError::NotFound(format!("view {view} out of range ({} views)", self.cameras.len())))
        }
    }

    fn check(&self, state: &EditState) -> Result<(), ApiError> {
        state.validate().map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let k = self.buffers.first().map_or(state.k(), |b| b.k);
        if state.k() != k {
            return Err(ApiError::BadRequest(format!("state has {} palette colors, scene has {k}", state.k())));
        }
        let sizes: Vec<_> = self.cameras.iter().map(|c| (c.width, c.height)).collect();
        state.validate_views(&sizes).map_err(|e| ApiError::BadRequest(e.to_string()))
    }

    /// Persists and publishes a new state. Callers hold the writer lock.
    fn commit(&self, state: EditState) -> Result<Snapshot, ApiError> {
        if let Some(path) = &self.state_path {
            persist(path, &state).map_err(|e| ApiError::Internal(e.to_string()))?;
        }
        let snap = {
            let mut cur = self.current.write().expect("state lock poisoned");
            *cur = Snapshot { revision: cur.revision + 1, state: Arc::new(state) };
            cur.clone()
        };
        // No subscribers is fine.
        let _ = self.events.send(state_event(&snap));
        Ok(snap)
    }
}

fn persist(path: &Path, state: &EditState) -> Result<()> {
    let text = serde_json::to_string_pretty(state).map_err(|e| GatewayError::Server(e.to_string()))?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| GatewayError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| GatewayError::io(path, e))
}

/// `state-changed` event pushed over the WebSocket. Curves come with their
/// sampled tables so clients can composite without refitting.
#[derive(Serialize)]
struct StateEvent<'a> {
    event: &'static str,
    revision: u64,
    state: &'a EditState,
    curve_samples: Vec<&'a [f64]>,
}

fn state_event(snap: &Snapshot) -> String {
    let ev = StateEvent {
        event: "state-changed",
        revision: snap.revision,
        state: &snap.state,
        curve_samples: snap.state.curves.curves.iter().map(|c| c.samples()).collect(),
    };
    serde_json::to_string(&ev).expect("state serializes")
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(serde_json::json!({ "error": msg }))).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewInfo {
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4×4.
    pub world_to_camera: [f64; 16],
    /// Held out by the every-8th evaluation split.
    pub held_out: bool,
}

/// Body of `POST /api/solve`. The listed constraints replace the current
/// ones; omitted pin lists keep the current pins.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolveRequest {
    pub constraints: Vec<PixelConstraint>,
    #[serde(default)]
    pub pinned_palette: Option<Vec<usize>>,
    #[serde(default)]
    pub pinned_curve_points: Option<Vec<CurvePin>>,
    #[serde(default)]
    pub solver: Option<SolverConfig>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveResponse {
    pub revision: u64,
    #[serde(flatten)]
    pub outcome: SolveOutcome,
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/views", get(views))
        .route("/api/buffers/{view}", get(buffer))
        .route("/api/state", get(get_state).put(put_state))
        .route("/api/curves", get(curves))
        .route("/api/solve", post(solve))
        .route("/api/render/{file}", get(render))
        .route("/ws", get(ws))
        .with_state(app)
}

async fn views(State(app): State<Arc<AppState>>) -> Json<Vec<ViewInfo>> {
    let out = app
        .cameras
        .iter()
        .enumerate()
        .map(|(index, c)| {
            let mut m = [0.0; 16];
            for i in 0..4 {
                m[4 * i..4 * i + 4].copy_from_slice(&c.world_to_camera[i]);
            }
            ViewInfo {
                index,
                width: c.width,
                height: c.height,
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                world_to_camera: m,
                held_out: index % EVAL_STRIDE == 0,
            }
        })
        .collect();
    Json(out)
}

fn parse_view(raw: &str) -> Result<usize, ApiError> {
    raw.parse().map_err(|_| ApiError::NotFound(format!("no view {raw:?}")))
}

async fn buffer(State(app): State<Arc<AppState>>, UrlPath(view): UrlPath<String>) -> Result<Response, ApiError> {
    let v = app.view(parse_view(&view)?)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], app.buffer_bytes[v].clone()).into_response())
}

fn with_revision(mut resp: Response, revision: u64) -> Response {
    resp.headers_mut().insert("x-state-revision", HeaderValue::from(revision));
    resp
}

async fn get_state(State(app): State<Arc<AppState>>) -> Response {
    let snap = app.snapshot();
    with_revision(Json(snap.state.as_ref()).into_response(), snap.revision)
}

async fn put_state(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let text = std::str::from_utf8(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let state = edit_state_from_json(text).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    app.check(&state)?;
    let _w = app.writer.lock().await;
    let snap = app.commit(state)?;
    Ok(with_revision(Json(snap.state.as_ref()).into_response(), snap.revision))
}

async fn curves(State(app): State<Arc<AppState>>) -> Json<Vec<Vec<f64>>> {
    Json(app.snapshot().state.curves.curves.iter().map(|c| c.samples().to_vec()).collect())
}

async fn solve(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Json<SolveResponse>, ApiError> {
    let req: SolveRequest = serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let _w = app.writer.lock().await;
    let mut state = app.snapshot().state.as_ref().clone();
    state.constraints = req.constraints;
    if let Some(p) = req.pinned_palette {
        state.pinned_palette = p;
    }
    if let Some(p) = req.pinned_curve_points {
        state.pinned_curve_points = p;
    }
    app.check(&state)?;
    let cfg = req.solver.unwrap_or_default();
    let buffers = app.buffers.clone();
    let outcome = tokio::task::spawn_blocking(move || solve_constraints(&state, &buffers, &cfg))
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
    .map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let snap = app.commit(outcome.state.clone())?;
    Ok(Json(SolveResponse { revision: snap.revision, outcome }))
}

async fn render(State(app): State<Arc<AppState>>, UrlPath(file): UrlPath<String>) -> Result<Response, ApiError> {
    let stem = file.strip_suffix(".png").ok_or_else(|| ApiError::NotFound(format!("no render {file:?}")))?;
    let v = app.view(parse_view(stem)?)?;
    let snap = app.snapshot();
    let buffers = app.buffers.clone();
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, ApiError> {
        let img = compose_edited(&buffers[v], &snap.state).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        encode_png(img.width, img.height, &img.rgb8).map_err(|e| ApiError::Internal(e.to_string()))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn ws(State(app): State<Arc<AppState>>, upgrade: WebSocketUpgrade) -> Response {
    upgrade.on_upgrade(move |socket| push_events(app, socket))
}

/// Sends the current state on connect, then every change.
async fn push_events(app: Arc<AppState>, mut socket: WebSocket) {
    let mut rx = app.events.subscribe();
    if socket.send(Message::Text(state_event(&app.snapshot()).into())).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            ev = rx.recv() => match ev {
                Ok(text) => {
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        return;
                    }
                }
                // Fell behind: resend the latest state instead of the missed ones.
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    if socket.send(Message::Text(state_event(&app.snapshot()).into())).await.is_err() {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Closed) => return,
            },
            msg = socket.recv() => match msg {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

/// Binds on localhost and serves until Ctrl-C.
pub async fn serve(app: Arc<AppState>, port: u16) -> Result<()> {
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| GatewayError::Server(e.to_string()))?;
    log::info!("listening on http://{addr}");
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| GatewayError::Server(e.to_string()))
}
