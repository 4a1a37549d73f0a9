//! HTTP retrieval service over one checkpoint and one gallery index.
//!
//! | route | |
//! |---|---|
//! | `POST /api/query` | multipart `sketch` (image), optional `text`, `connector`, `k` |
//! | `GET /api/image/{id}` | gallery photo; `?thumb=1` for a copy at most 256 px on its long side |
//! | `GET /api/meta` | gallery size, backbone id, fingerprint, connectors |
//! | `GET /healthz` | always 200 |
//!
//! Errors are JSON `{"error": "..."}`: 400 for bad input (undecodable or
//! oversize image, bad `k`), 404 for unknown ids, 409 when the index was
//! built by a different checkpoint, 503 while the model and index are
//! still loading or failed to load. Nothing mutates the index; reloading
//! means restarting.

use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use duet_core::checkpoint::load_model;
use duet_core::data::phrases::PhraseKind;
use duet_core::index::GalleryIndex;
use duet_core::model::{DuetModel, DEFAULT_CONNECTOR};
use duet_core::DuetError;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub const THUMBNAIL_SIDE: u32 = 256;
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub checkpoint: PathBuf,
    /// Overrides the backbone directory recorded in the checkpoint.
    pub backbone: Option<PathBuf>,
    pub index: PathBuf,
    /// Base for relative photo paths stored in the index.
    pub gallery_root: Option<PathBuf>,
    pub max_upload_bytes: usize,
    pub k_cap: usize,
    /// Allowed CORS origins; empty allows any.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            checkpoint: PathBuf::from("runs/desk/best"),
            backbone: None,
            index: PathBuf::from("runs/desk/index"),
            gallery_root: None,
            max_upload_bytes: 2 * 1024 * 1024,
            k_cap: 100,
            cors_origins: Vec::new(),
        }
    }
}

impl ServiceConfig {
    /// Applies `DUET_*` variables: `DUET_BIND`, `DUET_CHECKPOINT`,
    /// `DUET_BACKBONE`, `DUET_INDEX`, `DUET_GALLERY_ROOT`,
    /// `DUET_MAX_UPLOAD_BYTES`, `DUET_K_CAP`, `DUET_CORS_ORIGINS`
    /// (comma-separated).
    pub fn apply_env(
        &mut self,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<(), String> {
        for (key, value) in vars {
            let bad = |e: &dyn std::fmt::Display| format!("{key}={value:?}: {e}");
            match key.as_str() {
                "DUET_BIND" => self.bind = value.parse().map_err(|e| bad(&e))?,
                "DUET_CHECKPOINT" => self.checkpoint = value.into(),
                "DUET_BACKBONE" => self.backbone = Some(value.into()),
                "DUET_INDEX" => self.index = value.into(),
                "DUET_GALLERY_ROOT" => self.gallery_root = Some(value.into()),
                "DUET_MAX_UPLOAD_BYTES" => {
                    self.max_upload_bytes = value.parse().map_err(|e| bad(&e))?
                }
                "DUET_K_CAP" => self.k_cap = value.parse().map_err(|e| bad(&e))?,
                "DUET_CORS_ORIGINS" => {
                    self.cors_origins = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                }
                _ => {}
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.k_cap == 0 {
            return Err("k cap must be at least 1".into());
        }
        if self.max_upload_bytes == 0 {
            return Err("max upload size must be positive".into());
        }
        Ok(())
    }
}

/// The loaded, read-only model and index.
#[derive(Debug)]
pub struct Engine {
    pub model: DuetModel,
    pub index: GalleryIndex,
    pub gallery_root: Option<PathBuf>,
    fingerprint: String,
}

impl Engine {
    pub fn new(
        model: DuetModel,
        index: GalleryIndex,
        gallery_root: Option<PathBuf>,
    ) -> duet_core::Result<Self> {
        let fingerprint = model.fingerprint()?;
        index.check_fingerprint(&fingerprint)?;
        Ok(Self {
            model,
            index,
            gallery_root,
            fingerprint,
        })
    }

    pub fn load(config: &ServiceConfig) -> duet_core::Result<Self> {
        let (model, _) = load_model(
            &config.checkpoint,
            config.backbone.as_deref(),
            &duet_core::candle::Device::Cpu,
        )?;
        let index = GalleryIndex::load(&config.index)?;
        Self::new(model, index, config.gallery_root.clone())
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn photo_path(&self, stored: &Path) -> PathBuf {
        match &self.gallery_root {
            Some(root) if stored.is_relative() => root.join(stored),
            _ => stored.to_path_buf(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ServiceState {
    Loading,
    Ready(Arc<Engine>),
    Mismatch { index: String, checkpoint: String },
    Failed(String),
}

#[derive(Debug, Clone, Copy)]
pub struct Limits {
    pub max_upload_bytes: usize,
    pub k_cap: usize,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<RwLock<ServiceState>>,
    limits: Limits,
}

impl AppState {
    pub fn new(limits: Limits) -> Self {
        Self {
            inner: Arc::new(RwLock::new(ServiceState::Loading)),
            limits,
        }
    }

    pub fn ready(engine: Engine, limits: Limits) -> Self {
        let s = Self::new(limits);
        s.set(ServiceState::Ready(Arc::new(engine)));
        s
    }

    pub fn set(&self, state: ServiceState) {
        *self.inner.write().expect("state lock") = state;
    }

    pub fn state(&self) -> ServiceState {
        self.inner.read().expect("state lock").clone()
    }

    /// Loads the engine and records the outcome.
    pub fn load_from(&self, config: &ServiceConfig) {
        let started = Instant::now();
        let next = match Engine::load(config) {
            Ok(e) => {
                log::info!(
                    "loaded {} gallery photos, fingerprint {} ({:.1}s)",
                    e.index.len(),
                    e.fingerprint(),
                    started.elapsed().as_secs_f64()
                );
                ServiceState::Ready(Arc::new(e))
            }
            Err(DuetError::Fingerprint { index, checkpoint }) => {
                log::error!("index fingerprint {index} does not match checkpoint {checkpoint}; queries will fail with 409");
                ServiceState::Mismatch { index, checkpoint }
            }
            Err(e) => {
                log::error!("failed to load: {e}");
                ServiceState::Failed(e.to_string())
            }
        };
        self.set(next);
    }

    fn engine(&self) -> Result<Arc<Engine>, ApiError> {
        match self.state() {
            ServiceState::Ready(e) => Ok(e),
            ServiceState::Loading => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "index not loaded yet",
            )),
            ServiceState::Failed(msg) => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                format!("index not loaded: {msg}"),
            )),
            ServiceState::Mismatch { index, checkpoint } => Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("index fingerprint {index} does not match checkpoint {checkpoint}"),
            )),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<DuetError> for ApiError {
    fn from(e: DuetError) -> Self {
        let status = match &e {
            DuetError::Fingerprint { .. } => StatusCode::CONFLICT,
            DuetError::Input(_) | DuetError::Image(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f32,
    pub thumbnail_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEchoOut {
    pub sketch_sha256: Option<String>,
    pub text: Option<String>,
    pub connector: Option<String>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<Hit>,
    pub query: QueryEchoOut,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub gallery_size: usize,
    pub backbone_id: String,
    pub fingerprint: String,
    pub connectors: Vec<String>,
    pub default_connector: String,
    pub k_cap: usize,
    pub dim: usize,
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::bad("upload too large")
    } else {
        ApiError::bad(format!("malformed multipart body: {}", e.body_text()))
    }
}

async fn query(
    State(app): State<AppState>,
    mut multipart: Multipart,
) -> Result<Json<QueryResponse>, ApiError> {
    let engine = app.engine()?;
    let limits = app.limits;
    let mut sketch: Option<Bytes> = None;
    let mut text = None;
    let mut connector = None;
    let mut k = None;
    while let Some(field) = multipart.next_field().await.map_err(multipart_error)? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "sketch" => sketch = Some(field.bytes().await.map_err(multipart_error)?),
            "text" => text = Some(field.text().await.map_err(multipart_error)?),
            "connector" => connector = Some(field.text().await.map_err(multipart_error)?),
            "k" => k = Some(field.text().await.map_err(multipart_error)?),
            _ => {}
        }
    }
    let sketch = sketch.ok_or_else(|| ApiError::bad("missing sketch field"))?;
    if sketch.len() > limits.max_upload_bytes {
        return Err(ApiError::bad(format!(
            "sketch is {} bytes, limit is {}",
            sketch.len(),
            limits.max_upload_bytes
        )));
    }
    let k = match k.as_deref().map(str::trim) {
        None | Some("") => DEFAULT_K.min(limits.k_cap),
        Some(raw) => raw
            .parse::<usize>()
            .map_err(|_| ApiError::bad(format!("k must be a non-negative integer, got {raw:?}")))?,
    };
    if k > limits.k_cap {
        return Err(ApiError::bad(format!(
            "k = {k} exceeds the cap of {}",
            limits.k_cap
        )));
    }
    let text = text.filter(|t| !t.trim().is_empty());
    let result = tokio::task::spawn_blocking(move || -> Result<QueryResponse, ApiError> {
        let img = image::load_from_memory(&sketch)
            .map_err(|e| ApiError::bad(format!("undecodable image: {e}")))?;
        let r = engine.index.search(
            &engine.model,
            &img,
            text.as_deref(),
            connector.as_deref(),
            k,
        )?;
        let results = r
            .ids
            .into_iter()
            .zip(r.scores)
            .map(|(id, score)| Hit {
                thumbnail_url: format!("/api/image/{id}?thumb=1"),
                id,
                score,
            })
            .collect();
        Ok(QueryResponse {
            results,
            query: QueryEchoOut {
                sketch_sha256: r.query.sketch_sha256,
                text: r.query.text,
                connector: r.query.connector,
                k,
            },
            fingerprint: engine.fingerprint().to_string(),
        })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(result))
}

#[derive(Debug, Deserialize)]
struct ImageParams {
    thumb: Option<String>,
}

async fn gallery_image(
    State(app): State<AppState>,
    axum::extract::Path(id): axum::extract::Path<String>,
    Query(params): Query<ImageParams>,
) -> Result<Response, ApiError> {
    let engine = app.engine()?;
    let photo = engine
        .index
        .photo(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown id {id:?}")))?;
    let path = engine.photo_path(&photo.path);
    let thumb = matches!(params.thumb.as_deref(), Some("1" | "true" | "yes"));
    let (bytes, mime) = tokio::task::spawn_blocking(move || read_image(&path, thumb))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

/// The stored file, or a PNG shrunk to fit `THUMBNAIL_SIDE`.
fn read_image(path: &Path, thumb: bool) -> Result<(Vec<u8>, &'static str), ApiError> {
    let unreadable = |e: &dyn std::fmt::Display| {
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("gallery image {} unreadable: {e}", path.display()),
        )
    };
    let bytes = std::fs::read(path).map_err(|e| unreadable(&e))?;
    if !thumb {
        let mime = image::guess_format(&bytes)
            .map(|f| f.to_mime_type())
            .unwrap_or("application/octet-stream");
        return Ok((bytes, mime));
    }
    let mut img = image::load_from_memory(&bytes).map_err(|e| unreadable(&e))?;
    if img.width().max(img.height()) > THUMBNAIL_SIDE {
        img = img.thumbnail(THUMBNAIL_SIDE, THUMBNAIL_SIDE);
    }
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| unreadable(&e))?;
    Ok((out.into_inner(), "image/png"))
}

async fn meta(State(app): State<AppState>) -> Result<Json<Meta>, ApiError> {
    let engine = app.engine()?;
    Ok(Json(Meta {
        gallery_size: engine.index.len(),
        backbone_id: engine.index.backbone_id().to_string(),
        fingerprint: engine.fingerprint().to_string(),
        connectors: engine
            .model
            .phrases()
            .get(PhraseKind::ConnectingWord)
            .phrases
            .clone(),
        default_connector: DEFAULT_CONNECTOR.to_string(),
        k_cap: app.limits.k_cap,
        dim: engine.index.dim(),
    }))
}

async fn healthz() -> &'static str {
    "ok"
}

async fn access_log(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let started = Instant::now();
    let resp = next.run(req).await;
    log::info!(
        target: "duet::access",
        "method={method} path={path} status={} micros={}",
        resp.status().as_u16(),
        started.elapsed().as_micros()
    );
    resp
}

pub fn cors_layer(origins: &[String]) -> CorsLayer {
    let base = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers(Any);
    if origins.is_empty() {
        base.allow_origin(Any)
    } else {
        let list: Vec<HeaderValue> = origins.iter().filter_map(|o| o.parse().ok()).collect();
        base.allow_origin(AllowOrigin::list(list))
    }
}

/// Multipart overhead allowed on top of the sketch size.
const FORM_SLACK: usize = 64 * 1024;

pub fn router(state: AppState, cors: CorsLayer) -> Router {
    let body_limit = state.limits.max_upload_bytes + FORM_SLACK;
    Router::new()
        .route("/api/query", post(query))
        .route("/api/image/{id}", get(gallery_image))
        .route("/api/meta", get(meta))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(body_limit))
        .layer(cors)
        .layer(middleware::from_fn(access_log))
        .with_state(state)
}

async fn shutdown_signal() {
    if tokio::signal::ctrl_c().await.is_err() {
        std::future::pending::<()>().await;
    }
    log::info!("shutting down");
}

/// Binds, starts loading the engine in the background, and serves until
/// interrupted. `/healthz` answers immediately; other routes return 503
/// until loading finishes.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    config.validate().map_err(std::io::Error::other)?;
    let state = AppState::new(Limits {
        max_upload_bytes: config.max_upload_bytes,
        k_cap: config.k_cap,
    });
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let loader = state.clone();
    let cfg = config.clone();
    tokio::task::spawn_blocking(move || loader.load_from(&cfg));
    let app = router(state, cors_layer(&config.cors_origins));
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown_signal())
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides() {
        let mut c = ServiceConfig::default();
        c.apply_env([
            ("DUET_BIND".to_string(), "0.0.0.0:9000".to_string()),
            ("DUET_K_CAP".to_string(), "5".to_string()),
            (
                "DUET_CORS_ORIGINS".to_string(),
                "http://a, http://b".to_string(),
            ),
            ("HOME".to_string(), "/root".to_string()),
        ])
        .unwrap();
        assert_eq!(c.bind.port(), 9000);
        assert_eq!(c.k_cap, 5);
        assert_eq!(c.cors_origins, ["http://a", "http://b"]);
        assert!(c
            .apply_env([("DUET_K_CAP".to_string(), "0".to_string())])
            .is_err());
        assert!(c
            .apply_env([("DUET_BIND".to_string(), "nope".to_string())])
            .is_err());
    }
}
