//! Drive the HTTP job API in-process: submit a request, poll the job until
//! it finishes, then fetch a frame as PNG.
//!
//! cargo run --release -p factor-service --example http_client -- [checkpoint.fckp]
//!
//! Against a running server the same calls are plain HTTP:
//!
//! ```text
//! curl -X POST localhost:8080/v1/generate -d @request.json
//! curl localhost:8080/v1/jobs/job-000001
//! curl -o f0.png localhost:8080/v1/clips/job-000001/frames/0
//! ```

use std::time::Duration;

use axum::body::Body;
use axum::http::Request;
use factor_core::model::{build_model, ModelConfig};
use factor_service::http::{build, load_model, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

const REQUEST: &str = r#"{
  "prompt": "a purple triangle moving",
  "entities": [{"description": "triangle", "first_box": [0.1, 0.5, 0.5, 0.9],
                "last_box": [0.5, 0.1, 0.9, 0.5], "reference": "purple-triangle"}],
  "decode": {"steps": 8, "seed": 4}
}"#;

async fn call(router: &axum::Router, req: Request<Body>) -> (u16, Vec<u8>) {
    let resp = router.clone().oneshot(req).await.expect("router is infallible");
    let status = resp.status().as_u16();
    (status, resp.into_body().collect().await.expect("body").to_bytes().to_vec())
}

#[tokio::main]
async fn main() -> Result<(), String> {
    let model = match std::env::args().nth(1) {
        Some(path) => load_model(path.as_ref())?,
        None => build_model(&ModelConfig::compact(), 0).map_err(|e| e.to_string())?,
    };
    let state_dir = std::env::temp_dir().join("factor-http-example");
    let config = ServiceConfig {
        state_dir: state_dir.clone(),
        ..ServiceConfig::default()
    };
    let (router, _) = build(config, model)?;

    let (status, body) = call(&router, Request::post("/v1/generate").body(Body::from(REQUEST)).unwrap()).await;
    let submitted: Value = serde_json::from_slice(&body).unwrap();
    println!("POST /v1/generate -> {status} {submitted}");
    let id = submitted["id"].as_str().ok_or("no job id")?.to_string();

    let job = loop {
        let (_, body) = call(&router, Request::get(format!("/v1/jobs/{id}")).body(Body::empty()).unwrap()).await;
        let job: Value = serde_json::from_slice(&body).unwrap();
        if job["status"] == "done" || job["status"] == "failed" {
            break job;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    };
    println!("GET /v1/jobs/{id} -> {}", job["status"]);
    if job["status"] != "done" {
        return Err(format!("job failed: {}", job["error"]));
    }

    let (status, png) = call(
        &router,
        Request::get(format!("/v1/clips/{id}/frames/5?scale=24")).body(Body::empty()).unwrap(),
    )
    .await;
    let out = state_dir.join("frame5.png");
    std::fs::write(&out, &png).map_err(|e| e.to_string())?;
    println!("GET frame 5 -> {status}, {} bytes saved to {}", png.len(), out.display());

    let (_, body) = call(&router, Request::get("/v1/health").body(Body::empty()).unwrap()).await;
    println!("GET /v1/health -> {}", String::from_utf8_lossy(&body));
    Ok(())
}
