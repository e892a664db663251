//! HTTP and WebSocket edit service.
//!
//! Every revision is an immutable snapshot. Edits go through one writer lock
//! in arrival order and each creates the next revision; reads name a
//! revision (the latest by default) and never wait on the writer.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dmiso_core::render::{with_workers, Camera};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, Mutex};

use crate::dataset::encode_png;
use crate::scene_file::{encode_scene, SceneFile};
use crate::state::{apply_request, render_at, soup_at, Command, EditRequest};

/// Revisions kept for reads and checkout.
pub const KEPT_REVISIONS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogEntry {
    Edit { revision: u64, request: EditRequest },
    Checkout { revision: u64, checkout: u64 },
}

struct History {
    revisions: VecDeque<(u64, Arc<SceneFile>)>,
    log: Vec<LogEntry>,
}

pub struct AppState {
    history: RwLock<History>,
    writer: Mutex<()>,
    updates: broadcast::Sender<u64>,
    workers: usize,
}

impl AppState {
    pub fn new(file: SceneFile, workers: usize) -> Arc<Self> {
        Arc::new(Self {
            history: RwLock::new(History {
                revisions: VecDeque::from([(0, Arc::new(file))]),
                log: Vec::new(),
            }),
            writer: Mutex::new(()),
            updates: broadcast::channel(256).0,
            workers: workers.max(1),
        })
    }

    pub fn latest(&self) -> (u64, Arc<SceneFile>) {
        let h = self.history.read().expect("history lock");
        let (n, f) = h.revisions.back().expect("at least one revision");
        (*n, f.clone())
    }

    pub fn revision(&self, n: u64) -> Option<Arc<SceneFile>> {
        let h = self.history.read().expect("history lock");
        h.revisions.iter().find(|(m, _)| *m == n).map(|(_, f)| f.clone())
    }

    fn push(&self, file: SceneFile, entry: impl FnOnce(u64) -> LogEntry) -> u64 {
        let mut h = self.history.write().expect("history lock");
        let n = h.revisions.back().expect("at least one revision").0 + 1;
        h.revisions.push_back((n, Arc::new(file)));
        while h.revisions.len() > KEPT_REVISIONS {
            h.revisions.pop_front();
        }
        h.log.push(entry(n));
        drop(h);
        let _ = self.updates.send(n);
        n
    }
}

fn error(status: StatusCode, code: &str, reason: impl ToString) -> Response {
    (status, Json(json!({ "error": code, "reason": reason.to_string() }))).into_response()
}

fn bad_request(code: &str, reason: impl ToString) -> Response {
    error(StatusCode::BAD_REQUEST, code, reason)
}

type Params = HashMap<String, String>;

fn parse_param<T: std::str::FromStr>(q: &Params, key: &str) -> Result<Option<T>, Response> {
    match q.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| bad_request("bad_parameter", format!("cannot parse {key}={v}"))),
    }
}

fn snapshot(app: &AppState, q: &Params) -> Result<(u64, Arc<SceneFile>), Response> {
    match parse_param::<u64>(q, "rev")? {
        None => Ok(app.latest()),
        Some(n) => app
            .revision(n)
            .map(|f| (n, f))
            .ok_or_else(|| error(StatusCode::NOT_FOUND, "unknown_revision", format!("revision {n} is not available"))),
    }
}

fn default_time(file: &SceneFile) -> f64 {
    file.session.as_ref().map_or(file.time_range[0], |s| s.t0)
}

fn time_param(q: &Params, file: &SceneFile) -> Result<f64, Response> {
    let t = parse_param::<f64>(q, "t")?.unwrap_or_else(|| default_time(file));
    if !t.is_finite() {
        return Err(bad_request("bad_parameter", "t must be finite"));
    }
    Ok(t)
}

/// `cam=<index>` into the scene's cameras or `camera=<camera JSON>`.
fn camera_param(q: &Params, file: &SceneFile) -> Result<Camera, Response> {
    if let Some(text) = q.get("camera") {
        let cam: Camera = serde_json::from_str(text).map_err(|e| bad_request("bad_camera", e))?;
        cam.validate().map_err(|e| bad_request("bad_camera", e))?;
        return Ok(cam);
    }
    let i = parse_param::<usize>(q, "cam")?.unwrap_or(0);
    file.cameras
        .get(i)
        .copied()
        .ok_or_else(|| bad_request("bad_camera", format!("camera {i} out of range ({} cameras)", file.cameras.len())))
}

fn revision_header(n: u64) -> (header::HeaderName, String) {
    (header::HeaderName::from_static("x-dmiso-revision"), n.to_string())
}

async fn get_scene(State(app): State<Arc<AppState>>) -> Response {
    let (n, f) = app.latest();
    Json(json!({
        "revision": n,
        "p": f.scene.multis.len(),
        "k": f.scene.multis.iter().map(|m| m.subs.len()).collect::<Vec<_>>(),
        "sh_degree": f.scene.sh_degree,
        "cameras": f.cameras,
        "time_range": f.time_range,
        "frozen_at": f.session.as_ref().map(|s| s.t0),
        "soup_len": f.session.as_ref().map(|s| s.soup.len()),
        "mesh_bound": f.session.as_ref().is_some_and(|s| s.mesh.is_some()),
        "mesh_edited": f.session.as_ref().is_some_and(|s| s.mesh_edited),
    }))
    .into_response()
}

async fn get_timeline(State(app): State<Arc<AppState>>) -> Response {
    let (n, f) = app.latest();
    Json(json!({
        "revision": n,
        "start": f.time_range[0],
        "end": f.time_range[1],
        "frozen_at": f.session.as_ref().map(|s| s.t0),
    }))
    .into_response()
}

async fn get_soup(State(app): State<Arc<AppState>>, Query(q): Query<Params>) -> Response {
    let work = async {
        let (n, file) = snapshot(&app, &q)?;
        let t = time_param(&q, &file)?;
        let soup = tokio::task::spawn_blocking(move || soup_at(&file, t))
            .await
            .map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))?
            .map_err(|e| bad_request("soup_failed", e))?;
        let triangles: Vec<Value> = soup
            .iter()
            .map(|e| {
                json!({
                    "vertices": e.triangle.vertices().map(|v| [v.x, v.y, v.z]),
                    "opacity": e.appearance.opacity,
                    "sh": e.appearance.sh,
                    "core": e.core,
                })
            })
            .collect();
        Ok::<_, Response>(Json(json!({ "revision": n, "t": t, "triangles": triangles })).into_response())
    };
    work.await.unwrap_or_else(|r| r)
}

async fn get_render(State(app): State<Arc<AppState>>, Query(q): Query<Params>) -> Response {
    let work = async {
        let (n, file) = snapshot(&app, &q)?;
        let t = time_param(&q, &file)?;
        let cam = camera_param(&q, &file)?;
        // `format=f32` returns planar little-endian floats instead of a PNG
        let brute = parse_param::<bool>(&q, "brute")?.unwrap_or(false);
        let raw = match q.get("format").map(String::as_str) {
            None | Some("png") => false,
            Some("f32") => true,
            Some(other) => return Err(bad_request("bad_parameter", format!("unknown format {other}"))),
        };
        let workers = app.workers;
        let body = tokio::task::spawn_blocking(move || {
            let image = with_workers(workers, || render_at(&file, t, &cam, brute))?;
            if raw {
                return Ok(image.to_planar_f32());
            }
            encode_png(&image).map_err(|e| anyhow::anyhow!(e))
        })
        .await
        .map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))?
        .map_err(|e| bad_request("render_failed", e))?;
        let kind = if raw { "application/octet-stream" } else { "image/png" };
        Ok::<_, Response>(([(header::CONTENT_TYPE, kind.to_string()), revision_header(n)], body).into_response())
    };
    work.await.unwrap_or_else(|r| r)
}

async fn get_file(State(app): State<Arc<AppState>>, Query(q): Query<Params>) -> Response {
    match snapshot(&app, &q) {
        Err(r) => r,
        Ok((n, file)) => match encode_scene(&file) {
            Ok(bytes) => ([(header::CONTENT_TYPE, "application/octet-stream".to_string()), revision_header(n)], bytes).into_response(),
            Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e),
        },
    }
}

async fn get_log(State(app): State<Arc<AppState>>) -> Response {
    let h = app.history.read().expect("history lock");
    Json(json!({ "log": h.log })).into_response()
}

/// Applies a request as the next revision; returns it and any built mesh.
async fn commit(app: &Arc<AppState>, req: EditRequest) -> Result<(u64, Option<String>), Response> {
    let _writer = app.writer.lock().await;
    let (_, latest) = app.latest();
    let r = req.clone();
    let (file, mesh) = tokio::task::spawn_blocking(move || apply_request(&latest, &r))
        .await
        .map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))?
        .map_err(|e| bad_request("edit_rejected", e))?;
    let n = app.push(file, |revision| LogEntry::Edit { revision, request: req });
    Ok((n, mesh.map(|m| m.to_obj())))
}

fn parse_body(body: &Bytes) -> Result<Value, Response> {
    serde_json::from_slice(body).map_err(|e| bad_request("malformed_json", e))
}

async fn post_edit(State(app): State<Arc<AppState>>, body: Bytes) -> Response {
    let work = async {
        let req = EditRequest::from_value(parse_body(&body)?).map_err(|e| bad_request("malformed_edit", e))?;
        if matches!(req.command, Command::BuildMesh { .. }) {
            return Err(bad_request("malformed_edit", "use POST /mesh to build a mesh"));
        }
        let (n, _) = commit(&app, req).await?;
        Ok::<_, Response>(Json(json!({ "revision": n })).into_response())
    };
    work.await.unwrap_or_else(|r| r)
}

#[derive(Deserialize)]
struct MeshBody {
    #[serde(default)]
    radius: Option<f64>,
    #[serde(default)]
    t: Option<f64>,
}

async fn post_mesh(State(app): State<Arc<AppState>>, body: Bytes) -> Response {
    let work = async {
        let v = if body.is_empty() { json!({}) } else { parse_body(&body)? };
        let m: MeshBody = serde_json::from_value(v).map_err(|e| bad_request("malformed_mesh", e))?;
        if m.radius.is_some_and(|r| r.is_nan() || r <= 0.0) {
            return Err(bad_request("malformed_mesh", "radius must be positive"));
        }
        let req = EditRequest {
            t: m.t,
            command: Command::BuildMesh { radius: m.radius },
        };
        let (n, obj) = commit(&app, req).await?;
        Ok::<_, Response>(
            (
                [(header::CONTENT_TYPE, "text/plain".to_string()), revision_header(n)],
                obj.unwrap_or_default(),
            )
                .into_response(),
        )
    };
    work.await.unwrap_or_else(|r| r)
}

#[derive(Deserialize)]
struct CheckoutBody {
    revision: u64,
}

/// Makes an earlier revision the content of a new one.
async fn post_checkout(State(app): State<Arc<AppState>>, body: Bytes) -> Response {
    let work = async {
        let c: CheckoutBody = serde_json::from_value(parse_body(&body)?).map_err(|e| bad_request("malformed_checkout", e))?;
        let _writer = app.writer.lock().await;
        let file = app
            .revision(c.revision)
            .ok_or_else(|| error(StatusCode::NOT_FOUND, "unknown_revision", format!("revision {} is not available", c.revision)))?;
        let n = app.push((*file).clone(), |revision| LogEntry::Checkout { revision, checkout: c.revision });
        Ok::<_, Response>(Json(json!({ "revision": n })).into_response())
    };
    work.await.unwrap_or_else(|r| r)
}

async fn get_frames(State(app): State<Arc<AppState>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream_frames(app, socket))
}

/// The client sends `{"t": .., "cam": ..}` (or `"camera"`) to subscribe and
/// may resubscribe at any time. The server answers every subscription and
/// every new revision with a text `{"revision": n, "t": ..}` followed by the
/// PNG frame.
async fn stream_frames(app: Arc<AppState>, mut socket: WebSocket) {
    let mut updates = app.updates.subscribe();
    let mut sub: Option<Params> = None;
    loop {
        tokio::select! {
            msg = socket.recv() => {
                let Some(Ok(msg)) = msg else { return };
                match msg {
                    Message::Text(text) => {
                        let parsed: Result<Params, _> = serde_json::from_str::<serde_json::Map<String, Value>>(&text).map(|m| {
                            m.into_iter()
                                .map(|(k, v)| (k, match v { Value::String(s) => s, other => other.to_string() }))
                                .collect()
                        });
                        match parsed {
                            Ok(p) => sub = Some(p),
                            Err(e) => {
                                let reason = json!({ "error": "malformed_subscription", "reason": e.to_string() });
                                if socket.send(Message::Text(reason.to_string().into())).await.is_err() {
                                    return;
                                }
                                continue;
                            }
                        }
                    }
                    Message::Close(_) => return,
                    _ => continue,
                }
            }
            update = updates.recv() => {
                match update {
                    Ok(_) | Err(broadcast::error::RecvError::Lagged(_)) => {}
                    Err(broadcast::error::RecvError::Closed) => return,
                }
                if sub.is_none() {
                    continue;
                }
            }
        }
        let Some(q) = sub.clone() else { continue };
        let frame = async {
            let (n, file) = app.latest();
            let t = time_param(&q, &file).map_err(|_| "bad t".to_string())?;
            let cam = camera_param(&q, &file).map_err(|_| "bad camera".to_string())?;
            let workers = app.workers;
            let png = tokio::task::spawn_blocking(move || {
                with_workers(workers, || render_at(&file, t, &cam, false))
                    .map_err(|e| e.to_string())
                    .and_then(|img| encode_png(&img).map_err(|e| e.to_string()))
            })
            .await
            .map_err(|e| e.to_string())??;
            Ok::<_, String>((n, t, png))
        };
        let sent = match frame.await {
            Ok((n, t, png)) => {
                socket.send(Message::Text(json!({ "revision": n, "t": t }).to_string().into())).await.is_ok()
                    && socket.send(Message::Binary(png.into())).await.is_ok()
            }
            Err(reason) => socket
                .send(Message::Text(json!({ "error": "render_failed", "reason": reason }).to_string().into()))
                .await
                .is_ok(),
        };
        if !sent {
            return;
        }
    }
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/scene", get(get_scene))
        .route("/timeline", get(get_timeline))
        .route("/soup", get(get_soup))
        .route("/render", get(get_render))
        .route("/file", get(get_file))
        .route("/log", get(get_log))
        .route("/edit", post(post_edit))
        .route("/mesh", post(post_mesh))
        .route("/checkout", post(post_checkout))
        .route("/frames", get(get_frames))
        .with_state(app)
}

/// Binds `addr` and serves in the background. Fails if the port is taken.
pub async fn spawn(file: SceneFile, addr: SocketAddr, workers: usize) -> std::io::Result<(SocketAddr, Arc<AppState>, tokio::task::JoinHandle<()>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = AppState::new(file, workers);
    let router = router(app.clone());
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router).await {
            tracing::error!("server stopped: {e}");
        }
    });
    Ok((local, app, handle))
}

pub async fn serve(file: SceneFile, addr: SocketAddr, workers: usize) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(file, workers))).await
}
