use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use songdemand_cli::config::AppConfig;
use songdemand_cli::scenario::{records_to_csv, Scenario};
use songdemand_cli::server::{router, AppState};
use songdemand_cli::store::ProjectStore;

fn app(dir: &tempfile::TempDir) -> Router {
    let store = ProjectStore::open(dir.path().join("store")).unwrap();
    router(AppState::new(store, AppConfig::default()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn sample_csv(seed: u64) -> String {
    records_to_csv(&Scenario::builtin().simulate(seed).unwrap()).unwrap()
}

async fn ingest(app: &Router, seed: u64) {
    let (status, body) = call(app, "POST", "/ingest", Some(json!({ "csv": sample_csv(seed) }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
}

async fn wait_for(app: &Router, job: &Value) -> String {
    let id = job["job_id"].as_str().unwrap();
    for _ in 0..600 {
        let (status, body) = call(app, "GET", &format!("/jobs/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        match body["state"].as_str().unwrap() {
            "done" => return body["fit_id"].as_str().unwrap().to_string(),
            "failed" => panic!("job failed: {body}"),
            _ => tokio::time::sleep(Duration::from_millis(50)).await,
        }
    }
    panic!("job {id} did not finish");
}

fn assert_ordered(bands: &Value) {
    let rows = bands["bands"].as_array().unwrap();
    for pair in rows.windows(2) {
        for (lo, hi) in pair[0].as_array().unwrap().iter().zip(pair[1].as_array().unwrap()) {
            assert!(lo.as_f64().unwrap() <= hi.as_f64().unwrap());
        }
    }
}

#[tokio::test]
async fn health_reports_ok() {
    let dir = tempfile::tempdir().unwrap();
    let (status, body) = call(&app(&dir), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({ "status": "ok" }));
}

#[tokio::test]
async fn ingest_then_list_songs_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir);
    ingest(&app, 7).await;
    let (status, songs) = call(&app, "GET", "/songs", None).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = songs.as_array().unwrap().iter().map(|s| s["song_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["song-a", "song-b", "song-c", "song-d"]);
    let (status, doc) = call(&app, "GET", "/songs/song-a/curves", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(doc["song_id"], "song-a");
    assert_eq!(doc["aggregate"]["values"].as_array().unwrap().len(), 40);
}

#[tokio::test]
async fn forced_fit_job_feeds_predictive_and_what_if() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir);
    ingest(&app, 7).await;
    let (status, job) = call(&app, "POST", "/fit/forced", Some(json!({ "song": "song-a" }))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let fit_id = wait_for(&app, &job).await;

    let (status, fit) = call(&app, "GET", &format!("/fits/{fit_id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(fit["kind"], "adsr");

    let uri = format!("/fits/{fit_id}/predictive?horizon=20&quantiles=0.05,0.5,0.95&seed=3");
    let (status, bands) = call(&app, "GET", &uri, None).await;
    assert_eq!(status, StatusCode::OK, "{bands}");
    assert_ordered(&bands["aggregate"]);

    let policy = json!({ "total": 0.0, "weekly": vec![0.0; 40], "social_cap": 1.0 });
    let (status, what_if) =
        call(&app, "POST", "/optimize/whatif", Some(json!({ "fit": fit_id, "policy": policy }))).await;
    assert_eq!(status, StatusCode::OK, "{what_if}");
    assert_eq!(what_if["objective_delta"].as_f64().unwrap(), 0.0);
    let spend = what_if["plan"]["spend"].as_array().unwrap();
    assert!(spend.iter().flat_map(|t| t.as_array().unwrap()).flat_map(|j| j.as_array().unwrap()).all(|x| x.as_f64() == Some(0.0)));

    let policy = json!({ "total": 10.0, "weekly": vec![0.25; 40], "social_cap": 1.0 });
    let (status, plan) = call(&app, "POST", "/optimize/forced", Some(json!({ "fit": fit_id, "policy": policy }))).await;
    assert_eq!(status, StatusCode::OK, "{plan}");
    assert_eq!(plan["kind"], "planned");
}

#[tokio::test]
async fn null_fit_job_completes() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir);
    ingest(&app, 7).await;
    let mcmc = json!({ "chains": 2, "warmup": 100, "samples": 100 });
    let (status, job) = call(&app, "POST", "/fit/null", Some(json!({ "songs": ["song-a"], "mcmc": mcmc }))).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{job}");
    let fit_id = wait_for(&app, &job).await;
    let (_, fit) = call(&app, "GET", &format!("/fits/{fit_id}"), None).await;
    assert_eq!(fit["kind"], "null");
    let (status, bands) = call(&app, "GET", &format!("/fits/{fit_id}/predictive?horizon=10"), None).await;
    assert_eq!(status, StatusCode::OK, "{bands}");
    assert_ordered(&bands["aggregate"]);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir);
    let (status, _) = call(&app, "GET", "/fits/fit-0000000000000000", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/jobs/job-99", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", "/fit/forced", Some(json!({ "song": "nope" }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let bad = Request::builder().method("POST").uri("/ingest").body(Body::from("{not json")).unwrap();
    assert_eq!(app.clone().oneshot(bad).await.unwrap().status(), StatusCode::BAD_REQUEST);
    let (status, body) = call(&app, "POST", "/fit/null", Some(json!({ "songs": [], "mcmc": { "chains": 1 } }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].is_string(), "{body}");

    ingest(&app, 7).await;
    let (status, _) = call(&app, "POST", "/ingest", Some(json!({ "csv": sample_csv(8) }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, "POST", "/ingest", Some(json!({ "csv": sample_csv(8), "replace": true }))).await;
    assert_eq!(status, StatusCode::OK);
}
