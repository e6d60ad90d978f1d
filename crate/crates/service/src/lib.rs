//! HTTP + WebSocket front end for a single gaussfield model session.
//!
//! | Route                     | Purpose                                          |
//! |---------------------------|--------------------------------------------------|
//! | `POST /api/train`         | start a training job (`{image|image_png, config}`) |
//! | `GET  /api/status`        | job state and latest progress                    |
//! | `GET  /api/gaussians`     | means as `N × 2` little-endian `f32`             |
//! | `GET  /api/gaussians/meta`| `{n, d, baked, ...}`                             |
//! | `POST /api/edit`          | apply an edit script to the working copy         |
//! | `POST /api/undo`          | revert the last edit                             |
//! | `POST /api/render`        | `{width, height, region?, format}` → PNG         |
//! | `GET  /api/checkpoint`    | working copy as checkpoint bytes                 |
//! | `GET  /ws`                | progress and preview notifications               |
//!
//! The working copy is always checkpoint-exact: after training and after
//! every edit it is passed through a save/load cycle, so its renders match
//! those of the exported checkpoint byte for byte.

mod state;

use std::future::Future;
use std::ops::ControlFlow;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use gaussfield::io::{self, checkpoint, script};
use gaussfield::{apply_ops, EditOp, ImageBuffer, Model, ModelConfig, PixelRect, TrainOptions};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tower_http::cors::CorsLayer;

pub use state::{AppState, JobState, Status, UndoStack, DEFAULT_UNDO_DEPTH};

pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, body: json!({ "error": message.into() }) }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    fn no_model() -> Self {
        Self::new(StatusCode::NOT_FOUND, "no model loaded")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/train", post(train))
        .route("/api/status", get(status))
        .route("/api/gaussians", get(gaussians))
        .route("/api/gaussians/meta", get(gaussians_meta))
        .route("/api/edit", post(edit))
        .route("/api/undo", post(undo))
        .route("/api/render", post(render))
        .route("/api/checkpoint", get(export_checkpoint))
        .route("/ws", get(ws))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// Applies JSON overrides on top of the default config. Each bad key is
/// reported by name.
pub fn config_from_overrides(overrides: Option<&Value>) -> Result<ModelConfig, Vec<(String, String)>> {
    let mut base = serde_json::to_value(ModelConfig::default()).expect("config serializes");
    let Some(overrides) = overrides else {
        return Ok(ModelConfig::default());
    };
    let Some(obj) = overrides.as_object() else {
        return Err(vec![("config".into(), "must be an object".into())]);
    };
    let mut bad = Vec::new();
    for (k, v) in obj {
        let mut probe = base.clone();
        probe[k] = v.clone();
        match serde_json::from_value::<ModelConfig>(probe) {
            Ok(_) => base[k] = v.clone(),
            Err(e) => bad.push((k.clone(), e.to_string())),
        }
    }
    if !bad.is_empty() {
        return Err(bad);
    }
    let cfg: ModelConfig = serde_json::from_value(base).expect("every key checked");
    match cfg.clone().validate() {
        Ok(_) => Ok(cfg),
        Err(e) => Err(e.violations.into_iter().map(|v| (v.field.to_string(), v.reason)).collect()),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRequest {
    /// Path to a PNG on the server's filesystem.
    image: Option<String>,
    /// Base64-encoded PNG upload.
    image_png: Option<String>,
    config: Option<Value>,
}

fn load_request_image(req: &TrainRequest) -> ApiResult<ImageBuffer> {
    match (&req.image, &req.image_png) {
        (Some(path), None) => io::load_image(path).map_err(|e| ApiError::bad_request(e.to_string())),
        (None, Some(b64)) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| ApiError::bad_request(format!("image_png: {e}")))?;
            io::decode_png(&bytes).map_err(|e| ApiError::bad_request(e.to_string()))
        }
        _ => Err(ApiError::bad_request("exactly one of \"image\" or \"image_png\" is required")),
    }
}

fn json_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("request body: {e}")))
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

async fn train(State(app): State<AppState>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: TrainRequest = json_body(&body)?;
    let cfg = config_from_overrides(req.config.as_ref()).map_err(|bad| {
        let msg = bad.iter().map(|(f, r)| format!("{f}: {r}")).collect::<Vec<_>>().join("; ");
        let violations: Vec<Value> = bad.iter().map(|(f, r)| json!({"field": f, "reason": r})).collect();
        ApiError {
            status: StatusCode::BAD_REQUEST,
            body: json!({"error": format!("invalid config: {msg}"), "violations": violations}),
        }
    })?;
    let image = load_request_image(&req)?;
    let job_id = {
        let mut s = app.lock();
        if s.is_training() {
            return Err(ApiError::conflict("a training job is already running"));
        }
        let id = s.next_job;
        s.next_job += 1;
        s.status = Status {
            state: JobState::Running,
            job_id: Some(id),
            iter: 0,
            loss: None,
            psnr: None,
            version: 0,
            error: None,
        };
        id
    };
    let worker = app.clone();
    tokio::task::spawn_blocking(move || run_job(worker, job_id, image, cfg));
    Ok(Json(json!({ "job_id": job_id })))
}

fn run_job(app: AppState, job_id: u64, image: ImageBuffer, cfg: ModelConfig) {
    let progress = |r: &gaussfield::TrainRecord| {
        {
            let mut s = app.lock();
            s.status.iter = r.iter;
            s.status.loss = Some(r.loss);
            s.status.psnr = finite(r.psnr);
        }
        app.broadcast(json!({"type": "progress", "iter": r.iter, "loss": r.loss, "psnr": finite(r.psnr)}));
        ControlFlow::Continue(())
    };
    let result = gaussfield::fit(&image, cfg, &TrainOptions::default(), progress);
    let version = {
        let mut s = app.lock();
        match result {
            Ok(fitted) => {
                let last = fitted.stats.records.last();
                s.model = Some(Arc::new(fitted.model));
                s.version += 1;
                s.undo.clear();
                s.status = Status {
                    state: JobState::Done,
                    job_id: Some(job_id),
                    iter: last.map_or(0, |r| r.iter),
                    loss: last.map(|r| r.loss),
                    psnr: finite(fitted.psnr),
                    version: 0,
                    error: None,
                };
                Some(s.version)
            }
            Err(e) => {
                s.status.state = JobState::Error;
                s.status.error = Some(e.to_string());
                None
            }
        }
    };
    if let Some(v) = version {
        app.broadcast(json!({"type": "preview", "version": v}));
    }
}

async fn status(State(app): State<AppState>) -> Json<Status> {
    Json(app.status())
}

fn snapshot(app: &AppState) -> ApiResult<(Arc<Model>, u64)> {
    app.snapshot().ok_or_else(ApiError::no_model)
}

async fn gaussians(State(app): State<AppState>) -> ApiResult<Response> {
    let (model, version) = snapshot(&app)?;
    let mut bytes = Vec::with_capacity(model.len() * 8);
    for m in model.means() {
        bytes.extend_from_slice(&(m.x as f32).to_le_bytes());
        bytes.extend_from_slice(&(m.y as f32).to_le_bytes());
    }
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
    headers.insert("x-gaussian-count", model.len().into());
    headers.insert("x-embedding-dim", model.config().embedding_dim().into());
    headers.insert("x-baked", HeaderValue::from_static(if model.is_baked() { "true" } else { "false" }));
    headers.insert("x-render-version", version.into());
    Ok((headers, bytes).into_response())
}

async fn gaussians_meta(State(app): State<AppState>) -> ApiResult<Json<Value>> {
    let (model, version) = snapshot(&app)?;
    let (w, h) = model.native_size();
    Ok(Json(json!({
        "n": model.len(),
        "d": model.config().embedding_dim(),
        "baked": model.is_baked(),
        "has_mask": model.has_mask(),
        "width": w,
        "height": h,
        "version": version,
    })))
}

/// Runs `f` on the working copy and installs the result as a new version.
async fn mutate(
    app: &AppState,
    f: impl FnOnce(&Model) -> ApiResult<Option<Model>> + Send + 'static,
) -> ApiResult<u64> {
    let (model, version) = {
        let s = app.lock();
        if s.is_training() {
            return Err(ApiError::conflict("edits are rejected while training"));
        }
        let model = s.model.clone().ok_or_else(ApiError::no_model)?;
        if !model.is_baked() {
            return Err(ApiError::conflict("model is not baked"));
        }
        (model, s.version)
    };
    let base = model.clone();
    let edited = tokio::task::spawn_blocking(move || f(&base))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let Some(edited) = edited else {
        return Ok(version);
    };
    let v = {
        let mut s = app.lock();
        if s.version != version || s.is_training() {
            return Err(ApiError::conflict("the model changed while the edit was applied; retry"));
        }
        s.undo.push(model);
        s.model = Some(Arc::new(edited));
        s.version += 1;
        s.version
    };
    app.broadcast(json!({"type": "preview", "version": v}));
    Ok(v)
}

fn apply_script(model: &Model, ops: &[EditOp]) -> ApiResult<Option<Model>> {
    if ops.is_empty() {
        return Ok(None);
    }
    let mut m = model.clone();
    for (i, op) in ops.iter().enumerate() {
        apply_ops(&mut m, std::slice::from_ref(op))
            .map_err(|e| ApiError::bad_request(format!("op {i}: {e}")))?;
    }
    Ok(Some(checkpoint::reload(&m)))
}

async fn edit(State(app): State<AppState>, body: Bytes) -> ApiResult<Json<Value>> {
    let doc: Value = json_body(&body)?;
    let ops = script::parse_edit_value(&doc).map_err(|e| ApiError::bad_request(e.to_string()))?;
    // Serialize mutators so concurrent edits queue instead of conflicting.
    let _guard = app.mutator.lock().await;
    let v = mutate(&app, move |m| apply_script(m, &ops)).await?;
    Ok(Json(json!({ "render_version": v })))
}

async fn undo(State(app): State<AppState>) -> ApiResult<Json<Value>> {
    let _guard = app.mutator.lock().await;
    let v = {
        let mut s = app.lock();
        if s.is_training() {
            return Err(ApiError::conflict("edits are rejected while training"));
        }
        let prev = s.undo.pop().ok_or_else(|| ApiError::conflict("undo stack is empty"))?;
        s.model = Some(prev);
        s.version += 1;
        s.version
    };
    app.broadcast(json!({"type": "preview", "version": v}));
    Ok(Json(json!({ "render_version": v })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RenderRequest {
    width: usize,
    height: usize,
    region: Option<PixelRect>,
    format: Option<String>,
}

async fn render(State(app): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: RenderRequest = json_body(&body)?;
    if let Some(f) = req.format.as_deref().filter(|f| *f != "png") {
        return Err(ApiError::bad_request(format!("unsupported format {f:?}")));
    }
    let (model, version) = snapshot(&app)?;
    let png = tokio::task::spawn_blocking(move || -> ApiResult<Vec<u8>> {
        let img = model
            .render(req.width, req.height, req.region)
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        io::encode_png(&img).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    headers.insert("x-render-version", version.into());
    Ok((headers, png).into_response())
}

async fn export_checkpoint(State(app): State<AppState>) -> ApiResult<Response> {
    let (model, version) = snapshot(&app)?;
    let bytes = tokio::task::spawn_blocking(move || checkpoint::to_bytes(&model))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
    headers.insert("x-render-version", version.into());
    Ok((headers, bytes).into_response())
}

async fn ws(State(app): State<AppState>, upgrade: WebSocketUpgrade) -> Response {
    upgrade.on_upgrade(move |socket| pump_events(socket, app))
}

async fn pump_events(mut socket: WebSocket, app: AppState) {
    let mut events = app.subscribe();
    loop {
        tokio::select! {
            ev = events.recv() => match ev {
                Ok(text) => {
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                Err(tokio::sync::broadcast::error::RecvError::Lagged(_)) => continue,
                Err(tokio::sync::broadcast::error::RecvError::Closed) => break,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
}
