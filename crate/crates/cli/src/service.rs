//! HTTP run service.
//!
//! Runs execute on blocking worker threads, at most `workers` at a time, and
//! persist to `<data_dir>/runs/<run_id>/`. Run records live in memory and are
//! mirrored to `record.json` next to the artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{RwLock, Semaphore};

use crimesim_core::env::{CityEnvironment, CrimeDistribution};
use crimesim_core::metrics::{evaluate, hotspot_crime_ratio};
use crimesim_core::scenario::ScenarioPlan;
use crimesim_core::simulation::{read_run_dir, run_in, write_run_dir, FieldError, RunConfig, ScenarioRef, SimError};

use crate::heatmap::{delta_collection, feature_collection};
use crate::inputs::parse_ks;

/// Artifacts a run directory exposes through `/runs/{id}/files/{name}`.
pub const RUN_FILES: [&str; 4] = ["config.json", "events.jsonl", "summary.json", "transcript.jsonl"];

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Queued,
    Running,
    Done,
    Failed,
    Incomplete,
}

impl RunStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, RunStatus::Done | RunStatus::Failed | RunStatus::Incomplete)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub status: RunStatus,
    pub config: RunConfig,
    pub output_ref: PathBuf,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct Inner {
    env: Arc<CityEnvironment>,
    data_dir: PathBuf,
    runs: RwLock<BTreeMap<String, RunRecord>>,
    /// Per-cell counts of finished runs, kept to avoid rereading summaries.
    distributions: RwLock<BTreeMap<String, Arc<CrimeDistribution>>>,
    scenarios: RwLock<BTreeMap<String, ScenarioPlan>>,
    real: BTreeMap<String, Arc<CrimeDistribution>>,
    workers: Semaphore,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Creates the data directory and loads scenarios stored by earlier
    /// sessions.
    pub fn new(env: CityEnvironment, real: BTreeMap<String, CrimeDistribution>, config: ServiceConfig) -> std::io::Result<Self> {
        fs::create_dir_all(config.data_dir.join("runs"))?;
        let scenario_dir = config.data_dir.join("scenarios");
        fs::create_dir_all(&scenario_dir)?;
        let mut scenarios = BTreeMap::new();
        for entry in fs::read_dir(&scenario_dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                match ScenarioPlan::load(&path) {
                    Ok(plan) => {
                        let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                        scenarios.insert(id, plan);
                    }
                    Err(e) => tracing::warn!("skipping stored scenario {}: {e}", path.display()),
                }
            }
        }
        Ok(AppState(Arc::new(Inner {
            env: Arc::new(env),
            data_dir: config.data_dir,
            runs: RwLock::default(),
            distributions: RwLock::default(),
            scenarios: RwLock::new(scenarios),
            real: real.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            workers: Semaphore::new(config.workers.max(1)),
        })))
    }

    fn run_dir(&self, run_id: &str) -> PathBuf {
        self.0.data_dir.join("runs").join(run_id)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/runs", axum::routing::post(submit_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/heatmap", get(run_heatmap))
        .route("/runs/{id}/metrics", get(run_metrics))
        .route("/runs/{id}/files/{name}", get(run_file))
        .route("/runs/{a}/compare/{b}", get(compare_runs))
        .route("/city/cells", get(city_cells))
        .route("/scenarios", get(list_scenarios).post(create_scenario))
        .with_state(state)
}

/// Error response carrying a JSON body.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl ToString) -> Self {
        ApiError { status, body: json!({ "error": message.to_string() }) }
    }

    fn bad_request(message: impl ToString) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn fields(errors: Vec<FieldError>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, body: json!({ "errors": errors }) }
    }

    fn field(field: &str, message: impl ToString) -> Self {
        Self::fields(vec![FieldError { field: field.into(), message: message.to_string() }])
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} `{id}`"))
    }

    fn conflict(message: impl ToString) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    fn internal(message: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_submission(body: &[u8]) -> ApiResult<(RunConfig, Option<String>)> {
    let mut value: Value = serde_json::from_slice(body).map_err(|e| ApiError::field("<body>", e))?;
    let obj = value.as_object_mut().ok_or_else(|| ApiError::field("<body>", "expected a JSON object"))?;
    let scenario_id = match obj.remove("scenario_id") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s),
        Some(_) => return Err(ApiError::field("scenario_id", "must be a string")),
    };
    if obj.contains_key("city") {
        return Err(ApiError::field("city", "the service runs every simulation on the city it was started with"));
    }
    if !obj.contains_key("engine") {
        return Err(ApiError::field("engine", "required"));
    }
    let config: RunConfig = serde_json::from_value(value).map_err(|e| ApiError::field("<body>", e))?;
    if scenario_id.is_some() && config.scenario.is_some() {
        return Err(ApiError::field("scenario_id", "give either an inline scenario or a scenario_id, not both"));
    }
    if matches!(config.scenario, Some(ScenarioRef::Path(_))) {
        return Err(ApiError::field("scenario", "must be an inline plan; stored plans are referenced by scenario_id"));
    }
    Ok((config, scenario_id))
}

async fn submit_run(State(state): State<AppState>, body: axum::body::Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let (mut config, scenario_id) = parse_submission(&body)?;
    if let Some(id) = &scenario_id {
        let plan = state.0.scenarios.read().await.get(id).cloned();
        let plan = plan.ok_or_else(|| ApiError::field("scenario_id", format!("no stored scenario `{id}`")))?;
        config.scenario = Some(ScenarioRef::Inline(plan));
    }
    match config.validate() {
        Ok(()) => {}
        Err(SimError::Config(errors)) => return Err(ApiError::fields(errors)),
        Err(e) => return Err(ApiError::bad_request(e)),
    }

    let run_id = uuid::Uuid::new_v4().simple().to_string();
    let record = RunRecord {
        run_id: run_id.clone(),
        status: RunStatus::Queued,
        config: config.clone(),
        output_ref: state.run_dir(&run_id),
        created_at: Utc::now(),
        finished_at: None,
        error: None,
    };
    {
        let mut runs = state.0.runs.write().await;
        if runs.contains_key(&run_id) {
            return Err(ApiError::internal("run id collision"));
        }
        runs.insert(run_id.clone(), record);
    }
    tokio::spawn(execute(state, run_id.clone(), config));
    Ok((StatusCode::ACCEPTED, Json(json!({ "run_id": run_id }))))
}

async fn set_status(state: &AppState, run_id: &str, status: RunStatus, error: Option<String>) {
    let mut runs = state.0.runs.write().await;
    if let Some(rec) = runs.get_mut(run_id) {
        rec.status = status;
        if status.is_finished() {
            rec.finished_at = Some(Utc::now());
            rec.error = error;
        }
        let path = rec.output_ref.join("record.json");
        if path.parent().is_some_and(Path::exists) {
            if let Ok(text) = serde_json::to_string_pretty(rec) {
                if let Err(e) = fs::write(&path, text) {
                    tracing::warn!("cannot write {}: {e}", path.display());
                }
            }
        }
    }
}

async fn execute(state: AppState, run_id: String, config: RunConfig) {
    let Ok(_permit) = state.0.workers.acquire().await else { return };
    set_status(&state, &run_id, RunStatus::Running, None).await;
    tracing::info!(run_id, "run started");

    let env = state.0.env.clone();
    let dir = state.run_dir(&run_id);
    let result = tokio::task::spawn_blocking(move || {
        let output = run_in(&env, &config)?;
        write_run_dir(&dir, &output)?;
        Ok::<_, SimError>(output)
    })
    .await;

    let (status, error) = match result {
        Ok(Ok(output)) => {
            let status = if output.complete { RunStatus::Done } else { RunStatus::Incomplete };
            let error = (!output.complete)
                .then(|| format!("stopped after step {} because too many engine calls failed", output.steps_completed));
            state.0.distributions.write().await.insert(run_id.clone(), Arc::new(output.per_cell_counts));
            (status, error)
        }
        Ok(Err(e)) => (RunStatus::Failed, Some(e.to_string())),
        Err(join) => (RunStatus::Failed, Some(format!("worker panicked: {join}"))),
    };
    tracing::info!(run_id, ?status, "run finished");
    set_status(&state, &run_id, status, error).await;
}

async fn list_runs(State(state): State<AppState>) -> Json<Vec<RunRecord>> {
    Json(state.0.runs.read().await.values().cloned().collect())
}

async fn get_run(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<RunRecord>> {
    state.0.runs.read().await.get(&id).cloned().map(Json).ok_or_else(|| ApiError::not_found("run", &id))
}

/// Distribution of a finished run. Runs still in progress give 409.
async fn run_distribution(state: &AppState, id: &str) -> ApiResult<Arc<CrimeDistribution>> {
    let status = state.0.runs.read().await.get(id).map(|r| r.status).ok_or_else(|| ApiError::not_found("run", id))?;
    match status {
        RunStatus::Done | RunStatus::Incomplete => {}
        RunStatus::Failed => return Err(ApiError::conflict(format!("run `{id}` failed and has no output"))),
        _ => return Err(ApiError::conflict(format!("run `{id}` has not finished"))),
    }
    if let Some(d) = state.0.distributions.read().await.get(id) {
        return Ok(d.clone());
    }
    let dir = state.run_dir(id);
    let output =
        tokio::task::spawn_blocking(move || read_run_dir(&dir)).await.map_err(ApiError::internal)?.map_err(ApiError::internal)?;
    let dist = Arc::new(output.per_cell_counts);
    state.0.distributions.write().await.insert(id.to_owned(), dist.clone());
    Ok(dist)
}

async fn run_heatmap(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let dist = run_distribution(&state, &id).await?;
    Ok(Json(feature_collection(&state.0.env, &dist)))
}

#[derive(Debug, Deserialize)]
pub struct MetricsQuery {
    /// A real distribution name, or another run id.
    pub against: String,
    pub alpha: Option<f64>,
    pub k: Option<String>,
}

async fn run_metrics(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<MetricsQuery>,
) -> ApiResult<Json<Value>> {
    let alpha = q.alpha.unwrap_or(0.2);
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(ApiError::field("alpha", format!("must lie in (0, 1], got {alpha}")));
    }
    let ks = parse_ks(q.k.as_deref().unwrap_or("1.0,1.5,2.0")).map_err(|e| ApiError::field("k", e))?;
    let sim = run_distribution(&state, &id).await?;
    let real = match state.0.real.get(&q.against) {
        Some(d) => d.clone(),
        None if state.0.runs.read().await.contains_key(&q.against) => run_distribution(&state, &q.against).await?,
        None => return Err(ApiError::not_found("distribution", &q.against)),
    };
    let report = evaluate(&real, &sim, alpha, &ks, None).map_err(ApiError::bad_request)?;
    Ok(Json(serde_json::to_value(report).map_err(ApiError::internal)?))
}

#[derive(Debug, Deserialize)]
pub struct CompareQuery {
    pub alpha: Option<f64>,
    pub k: Option<String>,
}

fn hcr_or_zero(dist: &CrimeDistribution, alpha: f64) -> ApiResult<f64> {
    if dist.total() == 0 {
        return Ok(0.0);
    }
    hotspot_crime_ratio(dist, alpha).map_err(ApiError::bad_request)
}

/// Treated run `a` against control run `b`. The evaluation report treats
/// `b` as the reference distribution.
async fn compare_runs(
    State(state): State<AppState>,
    UrlPath((a, b)): UrlPath<(String, String)>,
    Query(q): Query<CompareQuery>,
) -> ApiResult<Json<Value>> {
    let alpha = q.alpha.unwrap_or(0.2);
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(ApiError::field("alpha", format!("must lie in (0, 1], got {alpha}")));
    }
    let ks = parse_ks(q.k.as_deref().unwrap_or("1.0,1.5,2.0")).map_err(|e| ApiError::field("k", e))?;
    let (left, right) = (run_distribution(&state, &a).await?, run_distribution(&state, &b).await?);
    let env = &state.0.env;
    let (hcr_a, hcr_b) = (hcr_or_zero(&left, alpha)?, hcr_or_zero(&right, alpha)?);
    let report = evaluate(&right, &left, alpha, &ks, None).ok();
    Ok(Json(json!({
        "a": { "run_id": a, "total": left.total(), "hotspot_crime_ratio": hcr_a, "heatmap": feature_collection(env, &left) },
        "b": { "run_id": b, "total": right.total(), "hotspot_crime_ratio": hcr_b, "heatmap": feature_collection(env, &right) },
        "delta": {
            "total": left.total() as i64 - right.total() as i64,
            "hotspot_crime_ratio": hcr_a - hcr_b,
            "heatmap": delta_collection(env, &left, &right),
        },
        "evaluation": report,
    })))
}

async fn run_file(State(state): State<AppState>, UrlPath((id, name)): UrlPath<(String, String)>) -> ApiResult<Response> {
    if !RUN_FILES.contains(&name.as_str()) {
        return Err(ApiError::not_found("file", &name));
    }
    let status = state.0.runs.read().await.get(&id).map(|r| r.status).ok_or_else(|| ApiError::not_found("run", &id))?;
    if !matches!(status, RunStatus::Done | RunStatus::Incomplete) {
        return Err(ApiError::conflict(format!("run `{id}` has no artifacts")));
    }
    let path = state.run_dir(&id).join(&name);
    let bytes = tokio::fs::read(&path).await.map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
    let content_type = if name.ends_with(".jsonl") { "application/x-ndjson" } else { "application/json" };
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}

async fn city_cells(State(state): State<AppState>) -> Json<Value> {
    let bundle = state.0.env.to_bundle();
    Json(json!({ "name": bundle.name, "metadata": bundle.metadata, "cells": bundle.cells }))
}

#[derive(Debug, Serialize)]
struct StoredScenario<'a> {
    scenario_id: &'a str,
    plan: &'a ScenarioPlan,
}

async fn list_scenarios(State(state): State<AppState>) -> Json<Value> {
    let scenarios = state.0.scenarios.read().await;
    let list: Vec<StoredScenario> = scenarios.iter().map(|(id, plan)| StoredScenario { scenario_id: id, plan }).collect();
    Json(json!(list))
}

async fn create_scenario(State(state): State<AppState>, body: axum::body::Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let plan: ScenarioPlan = serde_json::from_slice(&body).map_err(|e| ApiError::field("<body>", e))?;
    // Step ranges are checked against the run length at submission time.
    plan.validate(u32::MAX).map_err(|e| ApiError::field("interventions", e))?;
    let scenario_id = uuid::Uuid::new_v4().simple().to_string();
    let path = state.0.data_dir.join("scenarios").join(format!("{scenario_id}.json"));
    let text = serde_json::to_string_pretty(&plan).map_err(ApiError::internal)?;
    tokio::fs::write(&path, text).await.map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
    state.0.scenarios.write().await.insert(scenario_id.clone(), plan);
    Ok((StatusCode::CREATED, Json(json!({ "scenario_id": scenario_id }))))
}
