use std::collections::BTreeMap;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use crimesim_cli::service::{router, AppState, ServiceConfig, RUN_FILES};
use crimesim_core::env::CrimeDistribution;
use crimesim_core::simulation::{run_in, write_run_dir, RunConfig};
use crimesim_core::synthetic::SyntheticCity;

fn app(data_dir: &std::path::Path, workers: usize) -> Router {
    let env = SyntheticCity::grid(6, 6, 3).build();
    let real = CrimeDistribution::from_counts([("g0000", 5u64), ("g0007", 3), ("g0021", 2)]);
    let state = AppState::new(
        env,
        BTreeMap::from([("chicago_2019".to_owned(), real)]),
        ServiceConfig { data_dir: data_dir.to_owned(), workers },
    )
    .unwrap();
    router(state)
}

fn small_config(engine: Value, seed: u64) -> Value {
    json!({
        "counts": { "citizens": 200, "criminals": 60, "police": 20 },
        "steps": 10,
        "seed": seed,
        "engine": engine,
    })
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req.header("content-type", "application/json").body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn send_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = send(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn submit(app: &Router, body: Value) -> String {
    let (status, v) = send_json(app, "POST", "/runs", Some(body)).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");
    v["run_id"].as_str().unwrap().to_owned()
}

async fn wait_finished(app: &Router, id: &str) -> Value {
    for _ in 0..600 {
        let (status, rec) = send_json(app, "GET", &format!("/runs/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        if ["done", "failed", "incomplete"].contains(&rec["status"].as_str().unwrap()) {
            return rec;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("run {id} did not finish");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn submitted_run_finishes_and_heatmap_shares_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1);
    let id = submit(&app, small_config(json!({"kind": "routine", "p_base": 0.2}), 3)).await;
    let rec = wait_finished(&app, &id).await;
    assert_eq!(rec["status"], "done", "{rec}");
    assert!(rec["finished_at"].is_string());
    assert!(dir.path().join("runs").join(&id).join("summary.json").exists());

    let (status, fc) = send_json(&app, "GET", &format!("/runs/{id}/heatmap"), None).await;
    assert_eq!(status, StatusCode::OK);
    let features = fc["features"].as_array().unwrap();
    assert_eq!(features.len(), 36);
    let total: u64 = features.iter().map(|f| f["properties"]["count"].as_u64().unwrap()).sum();
    assert!(total > 0);
    let share: f64 = features.iter().map(|f| f["properties"]["share"].as_f64().unwrap()).sum();
    assert!((share - 1.0).abs() <= 1e-9, "{share}");

    let (status, report) =
        send_json(&app, "GET", &format!("/runs/{id}/metrics?against=chicago_2019&alpha=0.2&k=1.0,1.5,2.0"), None).await;
    assert_eq!(status, StatusCode::OK, "{report}");
    let hr = report["hr"].as_object().unwrap();
    assert_eq!(hr.keys().collect::<Vec<_>>(), ["1.0", "1.5", "2.0"]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1);

    let (status, _) = send_json(&app, "GET", "/runs/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send_json(&app, "GET", "/runs/nope/heatmap", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let mut bad = small_config(json!({"kind": "hotspot", "p_base": 3.0, "deterrence": 1.0}), 1);
    bad["steps"] = json!(0);
    let (status, body) = send_json(&app, "POST", "/runs", Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let fields: Vec<&str> = body["errors"].as_array().unwrap().iter().map(|e| e["field"].as_str().unwrap()).collect();
    assert_eq!(fields, ["steps", "engine.p_base"]);

    let (status, body) = send_json(&app, "POST", "/runs", Some(small_config(json!({"kind": "llm"}), 1))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["errors"].as_array().unwrap().iter().any(|e| e["field"] == "gateway"));

    let (status, _) = send_json(&app, "POST", "/runs", Some(json!({"steps": 3}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, "POST", "/runs", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let id = submit(&app, small_config(json!({"kind": "random", "p_base": 0.1}), 2)).await;
    wait_finished(&app, &id).await;
    let (status, body) = send_json(&app, "GET", &format!("/runs/{id}/metrics?against=chicago_2019&alpha=0"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["errors"][0]["field"], "alpha");
    let (status, _) = send_json(&app, "GET", &format!("/runs/{id}/metrics?against=unknown"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send_json(&app, "GET", &format!("/runs/{id}/files/secret.txt"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn dallas_plan_versus_control() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 2);
    let plan: Value = serde_json::from_str(include_str!("../../core/fixtures/dallas_plan.json")).unwrap();
    let (status, created) = send_json(&app, "POST", "/scenarios", Some(plan.clone())).await;
    assert_eq!(status, StatusCode::CREATED);
    let scenario_id = created["scenario_id"].as_str().unwrap().to_owned();
    let (_, list) = send_json(&app, "GET", "/scenarios", None).await;
    assert_eq!(list[0]["plan"], plan);

    let engine = json!({"kind": "hotspot", "p_base": 0.3, "deterrence": 1.0});
    let mut treated = small_config(engine.clone(), 11);
    treated["steps"] = json!(50);
    treated["scenario_id"] = json!(scenario_id);
    let mut control = small_config(engine, 11);
    control["steps"] = json!(50);
    let (a, b) = (submit(&app, treated).await, submit(&app, control).await);
    assert_ne!(a, b);
    wait_finished(&app, &a).await;
    wait_finished(&app, &b).await;

    let (status, cmp) = send_json(&app, "GET", &format!("/runs/{a}/compare/{b}"), None).await;
    assert_eq!(status, StatusCode::OK, "{cmp}");
    let (ta, tb) = (cmp["a"]["total"].as_u64().unwrap(), cmp["b"]["total"].as_u64().unwrap());
    assert!(ta <= tb, "treated {ta} > control {tb}");
    assert_eq!(cmp["delta"]["total"].as_i64().unwrap(), ta as i64 - tb as i64);
    assert_eq!(cmp["a"]["heatmap"]["features"].as_array().unwrap().len(), 36);
    let delta_sum: i64 =
        cmp["delta"]["heatmap"]["features"].as_array().unwrap().iter().map(|f| f["properties"]["delta"].as_i64().unwrap()).sum();
    assert_eq!(delta_sum, ta as i64 - tb as i64);

    let (status, _) = send_json(&app, "GET", &format!("/runs/{a}/metrics?against={b}"), None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn artifacts_match_direct_run_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1);
    let body = small_config(json!({"kind": "routine", "p_base": 0.1}), 9);
    let id = submit(&app, body.clone()).await;
    assert_eq!(wait_finished(&app, &id).await["status"], "done");

    let config: RunConfig = serde_json::from_value(body).unwrap();
    let out = run_in(&SyntheticCity::grid(6, 6, 3).build(), &config).unwrap();
    let local = dir.path().join("local");
    write_run_dir(&local, &out).unwrap();
    for name in RUN_FILES {
        let (status, bytes) = send(&app, "GET", &format!("/runs/{id}/files/{name}"), None).await;
        assert_eq!(status, StatusCode::OK, "{name}");
        assert_eq!(bytes, std::fs::read(local.join(name)).unwrap(), "{name} differs");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_submissions_get_distinct_ids() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 2);
    let mut tasks = Vec::new();
    for seed in 0..16 {
        let app = app.clone();
        tasks
            .push(tokio::spawn(async move { submit(&app, small_config(json!({"kind": "random", "p_base": 0.05}), seed)).await }));
    }
    let mut ids = Vec::new();
    for t in tasks {
        ids.push(t.await.unwrap());
    }
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 16);
    for id in &ids {
        assert_eq!(wait_finished(&app, id).await["status"], "done");
    }
    let (_, runs) = send_json(&app, "GET", "/runs", None).await;
    assert_eq!(runs.as_array().unwrap().len(), 16);
}

#[tokio::test]
async fn city_cells_lists_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1);
    let (status, body) = send_json(&app, "GET", "/city/cells", None).await;
    assert_eq!(status, StatusCode::OK);
    let cells = body["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 36);
    assert!(cells[0]["centroid"]["lat"].is_f64());
    assert!(cells[0]["features"]["safety_score"].is_f64());
}
