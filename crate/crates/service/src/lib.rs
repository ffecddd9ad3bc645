//! HTTP front end for the deformation engine: scenes, cages, jobs and
//! animations, all persisted under one workspace directory.

pub mod config;
pub mod error;
pub mod jobs;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::{to_bytes, Body, Bytes};
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use sketchcage_core::anim::{render_sequence, InterpMethod, Keyframe, SequenceOptions};
use sketchcage_core::cage::{build_cage, CageMesh, CageParams};
use sketchcage_core::guidance::GuidanceProvider;
use sketchcage_core::jacobian::{build_poisson, load_params};
use sketchcage_core::optim::{target_from_sketch, OptimConfig};
use sketchcage_core::pipeline::{prepare, render_cloud_color, render_cloud_silhouette, scene_sphere, scene_view};
use sketchcage_core::raster::{CameraView, SilhouetteMask};
use sketchcage_core::splat::{read_ply, SplatCloud};
use tower_http::cors::CorsLayer;

pub use config::ServiceConfig;
pub use error::ApiError;
use jobs::{JobHandle, JobInputs, JobRecord, JobStatus, ARTIFACT_FILES};

type ApiResult<T> = Result<T, ApiError>;

struct CachedResponse {
    status: StatusCode,
    content_type: Option<HeaderValue>,
    body: Bytes,
}

pub struct AppState {
    pub config: ServiceConfig,
    provider: Arc<dyn GuidanceProvider>,
    scenes: RwLock<HashMap<String, Arc<SplatCloud>>>,
    jobs: RwLock<HashMap<String, Arc<JobHandle>>>,
    running: Mutex<Option<Arc<JobHandle>>>,
    idempotent: Mutex<HashMap<String, Arc<CachedResponse>>>,
}

impl AppState {
    /// Opens the workspace, recovering job records from a previous run.
    pub fn open(config: ServiceConfig) -> std::io::Result<Arc<Self>> {
        for sub in ["scenes", "cages", "jobs", "animations"] {
            std::fs::create_dir_all(config.workspace.join(sub))?;
        }
        let provider: Arc<dyn GuidanceProvider> = config
            .guidance
            .provider()
            .map_err(|e| std::io::Error::other(e.to_string()))?
            .into();
        let jobs = jobs::recover(&config.workspace.join("jobs"))
            .into_iter()
            .map(|h| (h.snapshot().id, h))
            .collect();
        Ok(Arc::new(Self {
            config,
            provider,
            scenes: RwLock::default(),
            jobs: RwLock::new(jobs),
            running: Mutex::default(),
            idempotent: Mutex::default(),
        }))
    }

    fn dir(&self, kind: &str, id: &str) -> PathBuf {
        self.config.workspace.join(kind).join(id)
    }

    fn scene(&self, id: &str) -> ApiResult<Arc<SplatCloud>> {
        if let Some(c) = self.scenes.read().unwrap().get(id) {
            return Ok(c.clone());
        }
        let path = self.dir("scenes", id).join("scene.ply");
        if !valid_id(id) || !path.exists() {
            return Err(ApiError::not_found("scene", id));
        }
        let cloud = Arc::new(read_ply(&std::fs::read(path)?)?);
        self.scenes.write().unwrap().insert(id.into(), cloud.clone());
        Ok(cloud)
    }

    fn cage(&self, id: &str) -> ApiResult<(CageMeta, CageMesh)> {
        let dir = self.dir("cages", id);
        if !valid_id(id) || !dir.join("meta.json").exists() {
            return Err(ApiError::not_found("cage", id));
        }
        let meta: CageMeta =
            serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok((meta, CageMesh::load_obj(dir.join("cage.obj"))?))
    }

    fn job(&self, id: &str) -> ApiResult<Arc<JobHandle>> {
        self.jobs
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("job", id))
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

fn content_id(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())[..20].to_string()
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_body_bytes;
    let cors = state.config.cors_permissive;
    let app = Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/scenes", post(create_scene))
        .route("/scenes/{id}", get(scene_info))
        .route("/scenes/{id}/render", get(render_scene))
        .route("/scenes/{id}/cage", post(create_cage))
        .route("/cages/{id}/obj", get(cage_obj))
        .route("/jobs", post(create_job))
        .route("/jobs/{id}", get(job_status))
        .route("/jobs/{id}/result", get(job_result))
        .route("/jobs/{id}/files/{name}", get(job_file))
        .route("/jobs/{id}/cancel", post(cancel_job))
        .route("/animations", post(create_animation))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state);
    if cors {
        app.layer(CorsLayer::permissive())
    } else {
        app
    }
}

/// Replays the stored response when `Idempotency-Key` was seen before for
/// the same route.
async fn idempotent<F>(state: &AppState, headers: &HeaderMap, scope: &str, f: F) -> Response
where
    F: std::future::Future<Output = Response>,
{
    let key = headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(|k| format!("{scope}\n{k}"));
    let Some(key) = key else {
        return f.await;
    };
    if let Some(hit) = state.idempotent.lock().unwrap().get(&key).cloned() {
        return replay(&hit);
    }
    let resp = f.await;
    let (parts, body) = resp.into_parts();
    let bytes = match to_bytes(body, usize::MAX).await {
        Ok(b) => b,
        Err(e) => return ApiError::internal(e.to_string()).into_response(),
    };
    let cached = Arc::new(CachedResponse {
        status: parts.status,
        content_type: parts.headers.get(header::CONTENT_TYPE).cloned(),
        body: bytes,
    });
    // server errors are worth retrying for real
    if !parts.status.is_server_error() {
        state.idempotent.lock().unwrap().insert(key, cached.clone());
    }
    replay(&cached)
}

fn replay(c: &CachedResponse) -> Response {
    let mut r = Response::new(Body::from(c.body.clone()));
    *r.status_mut() = c.status;
    if let Some(ct) = &c.content_type {
        r.headers_mut().insert(header::CONTENT_TYPE, ct.clone());
    }
    r
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

#[derive(Deserialize)]
struct ScenePath {
    path: PathBuf,
}

#[derive(Serialize)]
struct SceneInfo {
    id: String,
    num_splats: usize,
    center: [f64; 3],
    radius: f64,
    default_view: CameraView,
}

fn scene_info_of(id: &str, cloud: &SplatCloud) -> ApiResult<SceneInfo> {
    let (c, r) = scene_sphere(cloud)?;
    Ok(SceneInfo {
        id: id.into(),
        num_splats: cloud.len(),
        center: c.into(),
        radius: r,
        default_view: scene_view(cloud, 0.0, 0.0, 256, 256, None)?,
    })
}

/// Body is either JSON `{"path": ...}` naming a PLY on the server's disk,
/// or the PLY bytes themselves.
async fn create_scene(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let st = state.clone();
    let is_json = headers
            .get(header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v.starts_with("application/json"));
    idempotent(&state, &headers, "scenes", async move {
        let result = blocking(move || {
            let bytes = if is_json {
                let p: ScenePath = serde_json::from_slice(&body).map_err(|e| ApiError::invalid("BadRequest", e.to_string()))?;
                std::fs::read(&p.path).map_err(|e| ApiError::invalid("BadPath", format!("{}: {e}", p.path.display())))?
            } else {
                body.to_vec()
            };
            let cloud = read_ply(&bytes)?;
            let id = content_id(&[&bytes]);
            let dir = st.dir("scenes", &id);
            std::fs::create_dir_all(&dir)?;
            if !dir.join("scene.ply").exists() {
                std::fs::write(dir.join("scene.ply"), &bytes)?;
            }
            let info = scene_info_of(&id, &cloud)?;
            st.scenes.write().unwrap().insert(id, Arc::new(cloud));
            Ok(info)
        })
        .await;
        match result {
            Ok(info) => (StatusCode::CREATED, Json(info)).into_response(),
            Err(e) => e.into_response(),
        }
    })
    .await
}

async fn scene_info(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SceneInfo>> {
    let cloud = state.scene(&id)?;
    Ok(Json(scene_info_of(&id, &cloud)?))
}

/// View parameters shared by the render query and job submission.
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ViewQuery {
    #[serde(default)]
    pub elev: f64,
    #[serde(default)]
    pub azim: f64,
    pub radius: Option<f64>,
    #[serde(default = "default_side")]
    pub w: usize,
    #[serde(default = "default_side")]
    pub h: usize,
    pub fov: Option<f64>,
}

fn default_side() -> usize {
    256
}

impl ViewQuery {
    fn view(&self, cloud: &SplatCloud) -> ApiResult<CameraView> {
        let mut v = scene_view(cloud, self.elev, self.azim, self.w, self.h, self.radius)?;
        if let Some(f) = self.fov {
            v.fov_y = f;
        }
        v.validate()?;
        Ok(v)
    }
}

// spelled out because flattening breaks number parsing in query strings
#[derive(Deserialize)]
struct RenderQuery {
    #[serde(default)]
    elev: f64,
    #[serde(default)]
    azim: f64,
    radius: Option<f64>,
    #[serde(default = "default_side")]
    w: usize,
    #[serde(default = "default_side")]
    h: usize,
    fov: Option<f64>,
    mode: Option<String>,
}

async fn render_scene(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RenderQuery>,
) -> ApiResult<Response> {
    let cloud = state.scene(&id)?;
    let view = ViewQuery {
        elev: q.elev,
        azim: q.azim,
        radius: q.radius,
        w: q.w,
        h: q.h,
        fov: q.fov,
    }
    .view(&cloud)?;
    let silhouette = match q.mode.as_deref() {
        None | Some("color") => false,
        Some("silhouette") => true,
        Some(m) => return Err(ApiError::invalid("BadRequest", format!("unknown mode `{m}`"))),
    };
    let bytes = blocking(move || {
        Ok(if silhouette {
            render_cloud_silhouette(&cloud, &view)?.to_png()
        } else {
            render_cloud_color(&cloud, &view, Vector3::zeros())?.to_png()
        })
    })
    .await?;
    Ok(png(bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CageMeta {
    id: String,
    scene: String,
    params: CageRequest,
    num_vertices: usize,
    num_faces: usize,
    obj_url: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct CageRequest {
    resolution: usize,
    offset_cells: f64,
    target_vertices: usize,
}

impl Default for CageRequest {
    fn default() -> Self {
        let p = CageParams::default();
        Self {
            resolution: p.resolution,
            offset_cells: p.offset_cells,
            target_vertices: p.target_vertices,
        }
    }
}

async fn create_cage(
    State(state): State<Arc<AppState>>,
    UrlPath(scene): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let st = state.clone();
    idempotent(&state, &headers, &format!("cage/{scene}"), async move {
        let run = async {
            let req: CageRequest = if body.is_empty() {
                CageRequest::default()
            } else {
                serde_json::from_slice(&body).map_err(|e| ApiError::invalid("BadRequest", e.to_string()))?
            };
            let cloud = st.scene(&scene)?;
            let id = content_id(&[scene.as_bytes(), &serde_json::to_vec(&req).unwrap()]);
            if let Ok((meta, _)) = st.cage(&id) {
                return Ok(meta);
            }
            let st2 = st.clone();
            blocking(move || {
                let params = CageParams {
                    resolution: req.resolution,
                    offset_cells: req.offset_cells,
                    target_vertices: req.target_vertices,
                };
                let cage = build_cage(&cloud.centroids(), &params)?;
                let dir = st2.dir("cages", &id);
                std::fs::create_dir_all(&dir)?;
                cage.save_obj(dir.join("cage.obj"))?;
                let meta = CageMeta {
                    obj_url: format!("/cages/{id}/obj"),
                    id,
                    scene,
                    params: req,
                    num_vertices: cage.num_vertices(),
                    num_faces: cage.num_faces(),
                };
                std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta).unwrap())?;
                Ok(meta)
            })
            .await
        };
        match run.await {
            Ok(meta) => (StatusCode::CREATED, Json(meta)).into_response(),
            Err(e) => e.into_response(),
        }
    })
    .await
}

async fn cage_obj(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    state.cage(&id)?;
    let text = std::fs::read(state.dir("cages", &id).join("cage.obj"))?;
    Ok(([(header::CONTENT_TYPE, "model/obj")], text).into_response())
}

#[derive(Deserialize)]
struct JobRequest {
    scene: String,
    cage: String,
    /// Base64 PNG of the sketched silhouette, at the view's resolution.
    sketch_png: String,
    view: ViewQuery,
    #[serde(default)]
    config: Value,
}

/// Overlays the JSON object `overrides` onto the default configuration.
pub fn merge_config(overrides: &Value) -> ApiResult<OptimConfig> {
    let mut base = serde_json::to_value(OptimConfig::default()).unwrap();
    match overrides {
        Value::Null => {}
        Value::Object(o) => {
            let obj = base.as_object_mut().unwrap();
            for (k, v) in o {
                if !obj.contains_key(k) {
                    return Err(ApiError::invalid("InvalidConfig", format!("unknown config field `{k}`")));
                }
                obj.insert(k.clone(), v.clone());
            }
        }
        _ => return Err(ApiError::invalid("InvalidConfig", "config must be an object")),
    }
    let cfg: OptimConfig = serde_json::from_value(base).map_err(|e| ApiError::invalid("InvalidConfig", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

async fn create_job(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let st = state.clone();
    idempotent(&state, &headers, "jobs", async move {
        match submit_job(st, &body) {
            Ok(rec) => (StatusCode::ACCEPTED, Json(rec)).into_response(),
            Err(e) => e.into_response(),
        }
    })
    .await
}

fn submit_job(state: Arc<AppState>, body: &[u8]) -> ApiResult<JobRecord> {
    let req: JobRequest = serde_json::from_slice(body).map_err(|e| ApiError::invalid("BadRequest", e.to_string()))?;
    let cloud = state.scene(&req.scene)?;
    let (meta, cage) = state.cage(&req.cage)?;
    if meta.scene != req.scene {
        return Err(ApiError::invalid("CageMismatch", "cage was built for another scene"));
    }
    let view = req.view.view(&cloud)?;
    let config = merge_config(&req.config)?;
    let png = base64::engine::general_purpose::STANDARD
        .decode(req.sketch_png.trim())
        .map_err(|e| ApiError::invalid("BadImage", e.to_string()))?;
    let sketch = SilhouetteMask::from_png(&png)?;
    if sketch.dims() != (view.width, view.height) {
        return Err(ApiError::invalid(
            "DimensionMismatch",
            format!("sketch is {:?}, view is {:?}", sketch.dims(), (view.width, view.height)),
        ));
    }
    let mut running = state.running.lock().unwrap();
    if let Some(h) = running.as_ref() {
        let rec = h.snapshot();
        if !rec.status.is_finished() {
            return Err(ApiError::conflict("JobRunning", format!("job {} is still running", rec.id)));
        }
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let dir = state.dir("jobs", &id);
    let rec = JobRecord {
        id: id.clone(),
        scene: req.scene.clone(),
        cage: req.cage.clone(),
        status: JobStatus::Queued,
        iteration: 0,
        total: config.iterations,
        history: Vec::new(),
        view,
        config,
        initial_l_sil: None,
        final_l_sil: None,
        artifacts: Vec::new(),
        error: None,
    };
    rec.save(&dir)?;
    let handle = Arc::new(JobHandle::new(dir, rec.clone()));
    state.jobs.write().unwrap().insert(id, handle.clone());
    *running = Some(handle.clone());
    let inputs = JobInputs {
        cloud,
        cage,
        tables_cache: state.dir("cages", &req.cage).join(format!("tables-{}.bin", req.scene)),
        target: target_from_sketch(&sketch),
        provider: state.provider.clone(),
    };
    tokio::task::spawn_blocking(move || jobs::execute(&handle, inputs));
    Ok(rec)
}

async fn job_status(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobRecord>> {
    Ok(Json(state.job(&id)?.snapshot()))
}

async fn job_result(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let rec = state.job(&id)?.snapshot();
    if rec.status != JobStatus::Done {
        return Err(ApiError::conflict("NotDone", format!("job {id} is {:?}", rec.status)));
    }
    let files: serde_json::Map<String, Value> = rec.artifacts.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    Ok(Json(json!({
        "id": rec.id,
        "initial_l_sil": rec.initial_l_sil,
        "final_l_sil": rec.final_l_sil,
        "iterations": rec.iteration,
        "files": files,
    })))
}

async fn job_file(
    State(state): State<Arc<AppState>>,
    UrlPath((id, name)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let handle = state.job(&id)?;
    if !ARTIFACT_FILES.contains(&name.as_str()) {
        return Err(ApiError::not_found("artifact", &name));
    }
    let path = handle.dir.join(&name);
    if !path.exists() {
        return Err(ApiError::not_found("artifact", &name));
    }
    let ct = match Path::new(&name).extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("csv") => "text/csv",
        Some("obj") => "model/obj",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, ct)], std::fs::read(path)?).into_response())
}

async fn cancel_job(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<(StatusCode, Json<JobRecord>)> {
    let handle = state.job(&id)?;
    let rec = handle.snapshot();
    if rec.status.is_finished() {
        // repeating a cancel is harmless
        if rec.status == JobStatus::Cancelled {
            return Ok((StatusCode::OK, Json(rec)));
        }
        return Err(ApiError::conflict("AlreadyFinished", format!("job {id} is {:?}", rec.status)));
    }
    handle.cancel.store(true, Ordering::Relaxed);
    Ok((StatusCode::ACCEPTED, Json(rec)))
}

#[derive(Deserialize, Serialize)]
struct AnimationRequest {
    jobs: Vec<String>,
    /// Keyframe times in [0, 1]; evenly spaced when omitted.
    times: Option<Vec<f64>>,
    #[serde(default = "default_fps")]
    fps: f64,
    #[serde(default = "default_duration")]
    duration: f64,
    view: Option<ViewQuery>,
    #[serde(default)]
    method: InterpMethod,
    #[serde(default)]
    ply: bool,
}

fn default_fps() -> f64 {
    30.0
}

fn default_duration() -> f64 {
    2.0
}

async fn create_animation(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let st = state.clone();
    idempotent(&state, &headers, "animations", async move {
        match blocking(move || build_animation(&st, &body)).await {
            Ok(tar) => ([(header::CONTENT_TYPE, "application/x-tar")], tar).into_response(),
            Err(e) => e.into_response(),
        }
    })
    .await
}

fn build_animation(state: &AppState, body: &[u8]) -> ApiResult<Vec<u8>> {
    let req: AnimationRequest = serde_json::from_slice(body).map_err(|e| ApiError::invalid("BadRequest", e.to_string()))?;
    if req.jobs.len() < 2 {
        return Err(ApiError::invalid(
            "InsufficientKeyframes",
            format!("need at least two keyframes, got {}", req.jobs.len()),
        ));
    }
    let times = match &req.times {
        Some(t) if t.len() != req.jobs.len() => return Err(ApiError::invalid("BadRequest", "times and jobs differ in length")),
        Some(t) => t.clone(),
        None => (0..req.jobs.len()).map(|i| i as f64 / (req.jobs.len() - 1) as f64).collect(),
    };
    let recs: Vec<JobRecord> = req
        .jobs
        .iter()
        .map(|id| {
            let rec = state.job(id)?.snapshot();
            if rec.status != JobStatus::Done {
                return Err(ApiError::conflict("NotDone", format!("job {id} is {:?}", rec.status)));
            }
            Ok(rec)
        })
        .collect::<ApiResult<_>>()?;
    let first = &recs[0];
    if recs.iter().any(|r| r.cage != first.cage || r.scene != first.scene) {
        return Err(ApiError::invalid("MismatchedCages", "keyframe jobs use different cages"));
    }
    let cloud = state.scene(&first.scene)?;
    let (_, cage) = state.cage(&first.cage)?;
    let system = build_poisson(&cage).map_err(|e| ApiError::invalid("CageError", e.to_string()))?;
    let keys = recs
        .iter()
        .zip(&times)
        .map(|(r, &t)| {
            let params = load_params(state.dir("jobs", &r.id).join("params.bin"))
                .map_err(|e| ApiError::internal(e.to_string()))?;
            Ok(Keyframe::new(t, &params, &system, r.id.clone())?)
        })
        .collect::<ApiResult<Vec<_>>>()?;
    let view = match &req.view {
        Some(v) => v.view(&cloud)?,
        None => first.view,
    };
    let id = content_id(&[body]);
    let out = state.dir("animations", &id);
    let cache = state.dir("cages", &first.cage).join(format!("tables-{}.bin", first.scene));
    let setup = prepare(&cloud, cage, Some(&cache))?;
    let opts = SequenceOptions {
        fps: req.fps,
        duration: req.duration,
        view,
        background: Vector3::from(first.config.background),
        method: req.method,
        write_ply: req.ply,
    };
    let manifest = render_sequence(&setup, &cloud, &keys, &opts, &out)?;
    let mut tar = tar::Builder::new(Vec::new());
    let names = std::iter::once("manifest.json".to_string())
        .chain(manifest.frames.iter().cloned())
        .chain(manifest.ply.iter().cloned());
    for name in names {
        tar.append_path_with_name(out.join(&name), &name)?;
    }
    Ok(tar.into_inner()?)
}

/// Binds and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let state = AppState::open(config)?;
    let listener = tokio::net::TcpListener::bind(&state.config.bind).await?;
    log::info!(
        "listening on {} with workspace {}",
        listener.local_addr()?,
        state.config.workspace.display()
    );
    axum::serve(listener, router(state)).await
}
