//! Axum routes.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, Request, State};
use axum::http::{header, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use schemars::{schema_for, JsonSchema};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use trackbench_core::geo::GeoPoint;
use trackbench_core::ingest::{self, BundleFiles, IngestError, ScenarioDocument};
use trackbench_core::model::{Beacon, Checkpoint, DeviceParams, Millis, TimeAlignment, ValidationError};
use trackbench_core::plugins::{PipelineConfig, PluginError, PluginMetadata, Registry};
use trackbench_core::replay::{self, EncounterEvent, ReplayTick};
use trackbench_core::rundir::{self, ResultDocument};
use trackbench_core::eval::MetricsDocument;

use crate::store::{RunStatus, Store, StoreError, StoredRun};

pub const DEFAULT_TICK_PAGE: usize = 500;
pub const MAX_TICK_PAGE: usize = 10_000;
const MAX_UPLOAD_BYTES: usize = 512 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub registry: Arc<Registry>,
    token: Option<String>,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub fn new(store: Arc<Store>, token: Option<String>, workers: usize) -> Self {
        Self {
            store,
            registry: Arc::new(Registry::with_builtins()),
            token,
            workers: Arc::new(Semaphore::new(workers.max(1))),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, detail: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({"error": error, "detail": detail.into()}),
        }
    }

    fn validation(errors: Vec<ValidationError>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({"error": "validation failed", "errors": errors}),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        log::error!("{e}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(what) => ApiError::new(StatusCode::NOT_FOUND, "not found", what),
            StoreError::Ingest(e) => ingest_error(e),
            other => ApiError::internal(other),
        }
    }
}

impl From<PluginError> for ApiError {
    fn from(e: PluginError) -> Self {
        let kind = match e {
            PluginError::UnknownPlugin(_) => "unknown plugin",
            _ => "invalid pipeline",
        };
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, kind, e.to_string())
    }
}

fn ingest_error(e: IngestError) -> ApiError {
    match e {
        IngestError::Validation(v) => ApiError::validation(v.0),
        IngestError::BundleIncomplete(name) => {
            ApiError::validation(vec![ValidationError::new(name, "missing from bundle")])
        }
        other => ApiError::validation(vec![ValidationError::new("bundle", other.to_string())]),
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/scenarios", post(upload_scenario).get(list_scenarios))
        .route("/scenarios/{id}", get(get_scenario))
        .route("/scenarios/{id}/floorplan", get(get_floorplan))
        .route("/scenarios/{id}/params", put(update_params))
        .route("/plugins", get(list_plugins))
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/result", get(get_result))
        .route("/runs/{id}/metrics", get(get_metrics))
        .route("/runs/{id}/cdf", get(get_cdf))
        .route("/runs/{id}/encounters", get(get_encounters))
        .route("/runs/{id}/ticks", get(get_ticks))
        .route("/schema", get(get_schema))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let mutating = matches!(*req.method(), Method::POST | Method::PUT | Method::DELETE | Method::PATCH);
    if let (true, Some(token)) = (mutating, state.token.as_deref()) {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

fn safe_bundle_path(name: &str) -> Option<String> {
    let name = name.trim_start_matches("./");
    let ok = !name.is_empty()
        && !name.starts_with('/')
        && !name.contains('\\')
        && name.split('/').all(|c| !c.is_empty() && c != "." && c != "..");
    ok.then(|| name.to_string())
}

/// Multipart upload. Each part's filename (or field name) is its
/// bundle-relative path; a single `.tar` part is unpacked instead.
async fn upload_scenario(State(state): State<AppState>, mut multipart: Multipart) -> ApiResult<Response> {
    let mut parts: Vec<(String, Option<String>, Bytes)> = Vec::new();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad multipart body", e.body_text()))?
    {
        let name = field
            .file_name()
            .map(str::to_string)
            .or_else(|| field.name().map(str::to_string))
            .unwrap_or_default();
        let ctype = field.content_type().map(str::to_string);
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad multipart body", e.body_text()))?;
        parts.push((name, ctype, bytes));
    }
    let is_tar = |(name, ctype, _): &(String, Option<String>, Bytes)| {
        name.ends_with(".tar") || ctype.as_deref() == Some("application/x-tar")
    };
    let files: BundleFiles = if parts.len() == 1 && is_tar(&parts[0]) {
        ingest::read_tar(parts[0].2.as_ref()).map_err(ingest_error)?
    } else {
        let mut files = BundleFiles::new();
        for (name, _, bytes) in parts {
            let path = safe_bundle_path(&name)
                .ok_or_else(|| ApiError::validation(vec![ValidationError::new(name, "invalid bundle path")]))?;
            files.insert(path, bytes.to_vec());
        }
        files
    };
    if files.is_empty() {
        return Err(ApiError::validation(vec![ValidationError::new("bundle", "no files uploaded")]));
    }
    let store = state.store.clone();
    let (stored, scenario) = blocking(move || Ok(store.insert_scenario(&files)?)).await?;
    let body = json!({
        "id": stored.id,
        "name": stored.name,
        "created_at": stored.created_at,
        "scenario_id": scenario.id,
        "devices": scenario.device_runs.len(),
        "beacons": scenario.beacons.len(),
    });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

#[derive(Debug, Serialize)]
struct ScenarioSummary {
    id: String,
    name: String,
    created_at: i64,
}

async fn list_scenarios(State(state): State<AppState>) -> ApiResult<Json<Vec<ScenarioSummary>>> {
    let store = state.store.clone();
    let list = blocking(move || Ok(store.list_scenarios()?)).await?;
    Ok(Json(
        list.into_iter()
            .map(|s| ScenarioSummary {
                id: s.id,
                name: s.name,
                created_at: s.created_at,
            })
            .collect(),
    ))
}

#[derive(Debug, Serialize)]
struct DeviceView {
    device_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    hardware: Option<String>,
    groundtruth_path: Vec<GeoPoint>,
    checkpoints: Vec<Checkpoint>,
    params: DeviceParams,
    error_counter: f64,
    raw_samples: usize,
}

fn scenario_view(store: &Store, id: &str) -> ApiResult<Value> {
    let stored = store.get_scenario(id)?;
    let scenario = store.load_scenario(id)?;
    let floorplan: Value = serde_json::from_slice(&store.read_scenario_file(id, "floorplan.geojson")?)
        .map_err(ApiError::internal)?;
    let devices: Vec<DeviceView> = scenario
        .device_runs
        .iter()
        .map(|r| DeviceView {
            device_id: r.device_id.clone(),
            hardware: r.hardware.clone(),
            groundtruth_path: r.groundtruth_path.clone(),
            checkpoints: r.checkpoints.clone(),
            params: r.params,
            error_counter: r.error_counter,
            raw_samples: r.raw_log.len(),
        })
        .collect();
    Ok(json!({
        "id": stored.id,
        "name": stored.name,
        "created_at": stored.created_at,
        "scenario_id": scenario.id,
        "time_alignment": scenario.time_alignment,
        "floorplan": floorplan,
        "beacons": scenario.beacons,
        "devices": devices,
        "total_groundtruth_length_m": scenario.total_groundtruth_length(),
    }))
}

async fn get_scenario(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let store = state.store.clone();
    Ok(Json(blocking(move || scenario_view(&store, &id)).await?))
}

async fn get_floorplan(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let store = state.store.clone();
    let bytes = blocking(move || Ok(store.read_scenario_file(&id, "floorplan.geojson")?)).await?;
    Ok(([(header::CONTENT_TYPE, "application/geo+json")], bytes).into_response())
}

/// Edits applied to one device of a stored scenario.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DeviceUpdate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<DeviceParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groundtruth_path: Option<Vec<GeoPoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<Checkpoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_counter: Option<f64>,
}

/// Body of `PUT /scenarios/{id}/params`. A beacon list replaces every
/// beacon, including ones embedded in the floorplan.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ParamsUpdate {
    #[serde(default)]
    pub devices: BTreeMap<String, DeviceUpdate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beacons: Option<Vec<Beacon>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_alignment: Option<TimeAlignment>,
}

fn strip_floorplan_beacons(bytes: &[u8]) -> ApiResult<Vec<u8>> {
    let mut root: Value = serde_json::from_slice(bytes).map_err(ApiError::internal)?;
    if let Some(features) = root.get_mut("features").and_then(Value::as_array_mut) {
        features.retain(|f| f.pointer("/properties/kind").and_then(Value::as_str) != Some("beacon"));
    }
    let mut out = serde_json::to_vec_pretty(&root).map_err(ApiError::internal)?;
    out.push(b'\n');
    Ok(out)
}

fn apply_update(store: &Store, id: &str, update: ParamsUpdate) -> ApiResult<Value> {
    let mut files = store.scenario_files(id)?;
    let text = std::str::from_utf8(files.get("scenario.json").map(Vec::as_slice).unwrap_or_default())
        .map_err(ApiError::internal)?;
    let mut doc = ScenarioDocument::parse(text).map_err(|e| ApiError::validation(e.0))?;
    let mut errors = Vec::new();
    for (device_id, change) in update.devices {
        let Some(d) = doc.devices.iter_mut().find(|d| d.device_id == device_id) else {
            errors.push(ValidationError::new(format!("devices.{device_id}"), "unknown device"));
            continue;
        };
        if let Some(p) = change.params {
            d.params = p;
        }
        if let Some(path) = change.groundtruth_path {
            d.groundtruth_path = path;
        }
        if let Some(c) = change.checkpoints {
            d.checkpoints = c;
        }
        if let Some(e) = change.error_counter {
            d.error_counter = e;
        }
    }
    if !errors.is_empty() {
        return Err(ApiError::validation(errors));
    }
    if let Some(a) = update.time_alignment {
        doc.time_alignment = a;
    }
    if let Some(beacons) = update.beacons {
        doc.beacons = beacons;
        if let Some(fp) = files.get("floorplan.geojson") {
            let stripped = strip_floorplan_beacons(fp)?;
            files.insert("floorplan.geojson".into(), stripped);
        }
    }
    let mut bytes = serde_json::to_vec_pretty(&doc).map_err(ApiError::internal)?;
    bytes.push(b'\n');
    files.insert("scenario.json".into(), bytes);
    store.replace_scenario(id, &files)?;
    scenario_view(store, id)
}

async fn update_params(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let de = &mut serde_json::Deserializer::from_slice(&body);
    let update: ParamsUpdate = serde_path_to_error(de)?;
    let store = state.store.clone();
    Ok(Json(blocking(move || apply_update(&store, &id, update)).await?))
}

fn serde_path_to_error<T: for<'de> Deserialize<'de>>(
    de: &mut serde_json::Deserializer<serde_json::de::SliceRead<'_>>,
) -> ApiResult<T> {
    T::deserialize(&mut *de).map_err(|e| {
        ApiError::validation(vec![ValidationError::new(
            "body",
            format!("{e} (line {}, column {})", e.line(), e.column()),
        )])
    })
}

async fn list_plugins(State(state): State<AppState>) -> Json<Vec<PluginMetadata>> {
    Json(state.registry.list())
}

/// Pipeline as an object or as a `filter,positioning,collab` slug list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(untagged)]
pub enum PipelineSpec {
    Slugs(String),
    Config(PipelineConfig),
}

impl PipelineSpec {
    pub fn resolve(&self) -> Result<PipelineConfig, PluginError> {
        match self {
            PipelineSpec::Slugs(s) => PipelineConfig::from_slugs(s),
            PipelineSpec::Config(c) => Ok(c.clone()),
        }
    }
}

/// Body of `POST /runs`. Alignment defaults to the scenario's own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunRequest {
    pub scenario_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<PipelineSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<TimeAlignment>,
}

async fn create_run(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let de = &mut serde_json::Deserializer::from_slice(&body);
    let req: RunRequest = serde_path_to_error(de)?;
    let pipeline = match &req.pipeline {
        Some(p) => p.resolve()?,
        None => PipelineConfig::standard(),
    };
    state.registry.assemble(&pipeline)?;

    let store = state.store.clone();
    let scenario_id = req.scenario_id.clone();
    let run = blocking(move || {
        let alignment = match req.alignment {
            Some(a) => a,
            None => {
                let files = store.scenario_files(&scenario_id)?;
                let text = std::str::from_utf8(files.get("scenario.json").map(Vec::as_slice).unwrap_or_default())
                    .map_err(ApiError::internal)?;
                ScenarioDocument::parse(text)
                    .map_err(|e| ApiError::validation(e.0))?
                    .time_alignment
            }
        };
        Ok(store.create_run(&scenario_id, &pipeline, req.seed, alignment)?)
    })
    .await?;

    let body = json!({"id": run.id, "status": run.status});
    tokio::spawn(execute_run(state, run));
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

async fn execute_run(state: AppState, run: StoredRun) {
    let Ok(_permit) = state.workers.clone().acquire_owned().await else {
        return;
    };
    let store = state.store.clone();
    let registry = state.registry.clone();
    let id = run.id.clone();
    let outcome = tokio::task::spawn_blocking(move || -> Result<(), String> {
        store.set_status(&run.id, RunStatus::Running, None).map_err(|e| e.to_string())?;
        let mut scenario = store.load_scenario(&run.scenario_id).map_err(|e| e.to_string())?;
        scenario.time_alignment = run.alignment;
        let artifacts = replay::run_replay_with(&registry, &scenario, &run.pipeline, run.seed)
            .map_err(|e| e.to_string())?;
        store.persist_run(&run.id, &artifacts).map_err(|e| e.to_string())?;
        Ok(())
    })
    .await
    .unwrap_or_else(|e| Err(format!("replay worker panicked: {e}")));
    if let Err(message) = outcome {
        log::warn!("run {id} failed: {message}");
        let _ = state.store.set_status(&id, RunStatus::Failed, Some(&message));
    }
}

async fn list_runs(State(state): State<AppState>) -> ApiResult<Json<Vec<StoredRun>>> {
    let store = state.store.clone();
    Ok(Json(blocking(move || Ok(store.list_runs()?)).await?))
}

async fn get_run(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<StoredRun>> {
    let store = state.store.clone();
    Ok(Json(blocking(move || Ok(store.get_run(&id)?)).await?))
}

fn done_run(store: &Store, id: &str) -> ApiResult<StoredRun> {
    let run = store.get_run(id)?;
    match run.status {
        RunStatus::Done => Ok(run),
        RunStatus::Failed => Err(ApiError::new(
            StatusCode::CONFLICT,
            "run failed",
            run.error_message.unwrap_or_default(),
        )),
        other => Err(ApiError::new(
            StatusCode::CONFLICT,
            "run not finished",
            format!("run {id} is {other:?}"),
        )),
    }
}

async fn run_file(state: &AppState, id: String, file: &'static str, ctype: &'static str) -> ApiResult<Response> {
    let store = state.store.clone();
    let bytes = blocking(move || {
        let run = done_run(&store, &id)?;
        std::fs::read(run.run_path.join(file)).map_err(ApiError::internal)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, ctype)], bytes).into_response())
}

async fn get_result(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    run_file(&state, id, rundir::RESULT_FILE, "application/json").await
}

async fn get_metrics(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    run_file(&state, id, rundir::METRICS_FILE, "application/json").await
}

async fn get_cdf(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    run_file(&state, id, rundir::CDF_FILE, "text/csv").await
}

#[derive(Debug, Deserialize)]
struct EncounterQuery {
    device: Option<String>,
}

async fn get_encounters(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EncounterQuery>,
) -> ApiResult<Json<Vec<EncounterEvent>>> {
    let store = state.store.clone();
    let events = blocking(move || {
        let run = done_run(&store, &id)?;
        rundir::read_encounters(&run.run_path).map_err(ApiError::internal)
    })
    .await?;
    Ok(Json(match q.device {
        Some(d) => events
            .into_iter()
            .filter(|e| e.participants.0 == d || e.participants.1 == d)
            .collect(),
        None => events,
    }))
}

#[derive(Debug, Deserialize)]
struct TickQuery {
    from: Option<Millis>,
    to: Option<Millis>,
    limit: Option<usize>,
}

/// One page of the tick log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TickPage {
    pub ticks: Vec<ReplayTick>,
    /// Timestamp to pass as `from` for the next page.
    pub next_from: Option<Millis>,
    pub total: usize,
}

pub fn page_ticks(ticks: Vec<ReplayTick>, from: Option<Millis>, to: Option<Millis>, limit: usize) -> TickPage {
    let in_range: Vec<ReplayTick> = ticks
        .into_iter()
        .filter(|t| from.is_none_or(|f| t.timestamp >= f) && to.is_none_or(|e| t.timestamp <= e))
        .collect();
    let total = in_range.len();
    let mut it = in_range.into_iter();
    let page: Vec<ReplayTick> = it.by_ref().take(limit).collect();
    TickPage {
        ticks: page,
        next_from: it.next().map(|t| t.timestamp),
        total,
    }
}

async fn get_ticks(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<TickQuery>,
) -> ApiResult<Json<TickPage>> {
    let limit = q.limit.unwrap_or(DEFAULT_TICK_PAGE).clamp(1, MAX_TICK_PAGE);
    let store = state.store.clone();
    let ticks = blocking(move || {
        let run = done_run(&store, &id)?;
        rundir::read_ticks(&run.run_path).map_err(ApiError::internal)
    })
    .await?;
    Ok(Json(page_ticks(ticks, q.from, q.to, limit)))
}

/// JSON schemas of every document the API accepts or returns.
pub fn schemas() -> Value {
    json!({
        "scenario": schema_for!(ScenarioDocument),
        "device_params": schema_for!(DeviceParams),
        "beacon": schema_for!(Beacon),
        "params_update": schema_for!(ParamsUpdate),
        "pipeline": schema_for!(PipelineConfig),
        "run_request": schema_for!(RunRequest),
        "plugin": schema_for!(PluginMetadata),
        "result": schema_for!(ResultDocument),
        "metrics": schema_for!(MetricsDocument),
        "encounter": schema_for!(EncounterEvent),
        "tick_page": schema_for!(TickPage),
        "validation_error": schema_for!(ValidationError),
    })
}

async fn get_schema() -> Json<Value> {
    Json(schemas())
}
