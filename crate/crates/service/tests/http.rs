use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use factor_core::inference::parse_request;
use factor_service::http::{build, ServiceConfig};
use factor_service::jobs::{write_snapshot, JobStore, RESTART_MESSAGE};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

mod common;

async fn send(router: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

async fn get(router: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(router, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn get_json(router: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = get(router, uri).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn submit(router: &Router, body: &str) -> (StatusCode, Value) {
    let req = Request::post("/v1/generate")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (s, b) = send(router, req).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn wait_finished(router: &Router, id: &str) -> Value {
    let t0 = Instant::now();
    loop {
        let (s, job) = get_json(router, &format!("/v1/jobs/{id}")).await;
        assert_eq!(s, StatusCode::OK);
        if job["status"] == "done" || job["status"] == "failed" {
            return job;
        }
        assert!(t0.elapsed() < Duration::from_secs(120), "job {id} did not finish");
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

fn service(dir: &std::path::Path, tweak: impl FnOnce(&mut ServiceConfig)) -> Router {
    let mut cfg = common::config(dir);
    tweak(&mut cfg);
    build(cfg, common::model()).unwrap().0
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn submit_poll_and_fetch_frames() {
    let dir = tempfile::tempdir().unwrap();
    let router = service(dir.path(), |_| {});
    let (s, body) = submit(&router, &common::request(3)).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(body["status"], "queued");
    let id = body["id"].as_str().unwrap().to_string();
    let job = wait_finished(&router, &id).await;
    assert_eq!(job["status"], "done", "{job}");
    assert_eq!(job["result"]["frames"], 11);
    assert_eq!(job["frames_url"], format!("/v1/clips/{id}/frames/{{k}}"));

    let (s, png) = get(&router, &format!("/v1/clips/{id}/frames/0?scale=2")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&png[1..4], b"PNG");
    assert_eq!(get(&router, &format!("/v1/clips/{id}/frames/11")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&router, "/v1/jobs/job-424242").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&router, "/v1/clips/job-424242/frames/0").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn invalid_requests_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let router = service(dir.path(), |_| {});
    let bad = common::request(1).replace("[0.0, 0.0, 0.4, 0.4]", "[0.5, 0.0, 0.4, 0.4]");
    let (s, body) = submit(&router, &bad).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "entities[0].first_box");
    assert!(body["error"].as_str().unwrap().len() > 3);

    let (s, body) = submit(&router, r#"{"prompt": "a red square", "decode": {"steps": 0}}"#).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "decode.steps");

    let (s, body) = submit(&router, "{not json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "body");

    let (_, health) = get_json(&router, "/v1/health").await;
    assert_eq!(health["jobs"], 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_queue_answers_429() {
    let dir = tempfile::tempdir().unwrap();
    let router = service(dir.path(), |c| c.queue_capacity = 1);
    let slow = common::request(1).replace("\"steps\": 4", "\"steps\": 48");
    let (s, first) = submit(&router, &slow).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let (s, body) = submit(&router, &slow).await;
    assert_eq!(s, StatusCode::TOO_MANY_REQUESTS);
    assert!(body["error"].as_str().unwrap().contains("full"));
    wait_finished(&router, first["id"].as_str().unwrap()).await;
    assert_eq!(submit(&router, &common::request(2)).await.0, StatusCode::ACCEPTED);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn same_seed_gives_identical_frames() {
    let dir = tempfile::tempdir().unwrap();
    let router = service(dir.path(), |_| {});
    let mut frames = Vec::new();
    for seed in [9, 9, 10] {
        let (_, body) = submit(&router, &common::request(seed)).await;
        let id = body["id"].as_str().unwrap().to_string();
        assert_eq!(wait_finished(&router, &id).await["status"], "done");
        let mut all = Vec::new();
        for k in 0..11 {
            let (s, png) = get(&router, &format!("/v1/clips/{id}/frames/{k}?scale=1")).await;
            assert_eq!(s, StatusCode::OK);
            all.extend(png);
        }
        frames.push(all);
    }
    assert_eq!(frames[0], frames[1]);
    assert_ne!(frames[0], frames[2]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrency_is_bounded_and_start_order_is_fifo() {
    let dir = tempfile::tempdir().unwrap();
    let router = service(dir.path(), |c| c.max_concurrency = 2);
    let mut ids = Vec::new();
    for seed in 0..5 {
        let (s, body) = submit(&router, &common::request(seed)).await;
        assert_eq!(s, StatusCode::ACCEPTED);
        ids.push(body["id"].as_str().unwrap().to_string());
    }
    let mut starts = Vec::new();
    for id in &ids {
        let job = wait_finished(&router, id).await;
        assert_eq!(job["status"], "done");
        starts.push(job["start_index"].as_u64().unwrap());
    }
    assert_eq!(starts, vec![0, 1, 2, 3, 4]);
    let (_, health) = get_json(&router, "/v1/health").await;
    let peak = health["peak_running"].as_u64().unwrap();
    assert!((1..=2).contains(&peak), "peak {peak}");
    assert_eq!(health["running"], 0);
    assert_eq!(health["max_concurrency"], 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn restart_fails_interrupted_jobs_and_keeps_finished_ones() {
    let dir = tempfile::tempdir().unwrap();
    let done_id = {
        let router = service(dir.path(), |_| {});
        let (_, body) = submit(&router, &common::request(4)).await;
        let id = body["id"].as_str().unwrap().to_string();
        wait_finished(&router, &id).await;
        id
    };
    // Simulate a crash mid-decode: one job running, one queued.
    let snap_path = dir.path().join("jobs.json");
    let snap = factor_service::jobs::read_snapshot(&snap_path).unwrap().unwrap();
    let mut store = JobStore::restore(snap, 256, 32, |_| true);
    let wire = parse_request(&common::request(5)).unwrap();
    let running = store.submit(wire.clone()).unwrap().0;
    store.start(&running).unwrap();
    let queued = store.submit(wire).unwrap().0;
    write_snapshot(&snap_path, &store.snapshot()).unwrap();

    let router = service(dir.path(), |_| {});
    for id in [&running, &queued] {
        let (_, job) = get_json(&router, &format!("/v1/jobs/{id}")).await;
        assert_eq!(job["status"], "failed");
        assert_eq!(job["error"], RESTART_MESSAGE);
    }
    let (_, job) = get_json(&router, &format!("/v1/jobs/{done_id}")).await;
    assert_eq!(job["status"], "done");
    assert_eq!(get(&router, &format!("/v1/clips/{done_id}/frames/0")).await.0, StatusCode::OK);
    let (_, body) = submit(&router, &common::request(6)).await;
    assert!(body["id"].as_str().unwrap() > queued.as_str());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn vocab_describes_the_request_space() {
    let dir = tempfile::tempdir().unwrap();
    let router = service(dir.path(), |_| {});
    let (s, v) = get_json(&router, "/v1/vocab").await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["descriptions"].as_array().unwrap().iter().any(|d| d == "square"));
    assert!(v["words"].as_array().unwrap().iter().any(|d| d == "red"));
    assert!(v["swatches"].as_array().unwrap().iter().any(|s| s["id"] == "red-square"));
    assert_eq!(v["control"], true);
    assert_eq!(v["max_entities"], 4);
    assert_eq!(v["frames_per_window"], 11);
    assert_eq!(v["grid"]["height"], 8);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cors_preflight_is_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let router = service(dir.path(), |_| {});
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/v1/generate")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = router.clone().oneshot(req).await.unwrap();
    assert!(resp.status().is_success());
    assert!(resp.headers().contains_key("access-control-allow-origin"));
}

#[test]
fn config_validation() {
    let mut cfg = ServiceConfig::default();
    assert!(cfg.validate().is_ok());
    cfg.max_concurrency = 0;
    assert!(cfg.validate().is_err());
}
