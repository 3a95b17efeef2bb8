mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use common::*;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use visagent::api::router;
use visagent::orchestrator::Phase;
use visagent::RunConfig;

struct Reply {
    status: StatusCode,
    content_type: Option<String>,
    bytes: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.bytes)))
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let res = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = res.status();
    let content_type = res.headers().get(header::CONTENT_TYPE).map(|v| v.to_str().unwrap().to_string());
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, content_type, bytes }
}

fn app() -> (tempfile::TempDir, Router) {
    let (dir, store) = temp_store();
    (dir, router(Arc::new(deterministic(store)), None))
}

async fn create(app: &Router, config: &RunConfig) -> String {
    let body = json!({"story": {"text": jack_text(), "title": "jack"}, "config": config});
    let r = call(app, Method::POST, "/runs", Some(body)).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&r.bytes));
    let v = r.json();
    assert_eq!(v["title"], "jack");
    v["run_id"].as_str().unwrap().to_string()
}

/// Polls the run view until `done` holds for its phase.
async fn wait_for(app: &Router, id: &str, done: impl Fn(&str) -> bool) -> Value {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let v = call(app, Method::GET, &format!("/runs/{id}"), None).await.json();
        if done(v["phase"].as_str().unwrap()) {
            return v;
        }
        assert!(Instant::now() < deadline, "run stuck in {} ({})", v["phase"], v["error"]);
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn review_round_trip_over_http() {
    let (_d, app) = app();
    let id = create(&app, &review_config()).await;
    let view = wait_for(&app, &id, |p| p == Phase::AwaitingDescriptionFeedback.as_str()).await;
    assert_eq!(view["open_gate"]["gate"], "descriptions");
    assert_eq!(view["num_scenes"], 5);
    assert_eq!(view["characters"].as_array().unwrap().len(), 3);

    // Wrong gate, wrong run id and malformed payloads leave the run alone.
    let r = call(&app, Method::POST, &format!("/runs/{id}/approval"), Some(json!({"gate": "element", "actor": "ana"}))).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.json()["error"], "gate_closed");
    let r = call(
        &app,
        Method::POST,
        &format!("/runs/{id}/approval"),
        Some(json!({"run_id": "other", "gate": "descriptions", "actor": "ana"})),
    )
    .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let r = call(&app, Method::POST, &format!("/runs/{id}/approval"), Some(json!({"gate": "descriptions"}))).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let r = call(&app, Method::POST, &format!("/runs/{id}/evaluate"), None).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.json()["error"], "not_ready");

    let edit = json!({
        "gate": "descriptions",
        "actor": "ana",
        "edits": [{"target": "scene", "target_id": "1", "verdict": "modify", "patched_fields": {"summary": "Jack meets a merchant."}}]
    });
    let r = call(&app, Method::POST, &format!("/runs/{id}/approval"), Some(edit)).await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.bytes));
    let view = wait_for(&app, &id, |p| p == Phase::AwaitingElementApproval.as_str()).await;
    assert_eq!(view["scenes"][1]["summary"], "Jack meets a merchant.");
    assert_eq!(view["open_gate"]["scene_index"], 0);

    let reject = json!({
        "gate": "element",
        "scene_index": 0,
        "actor": "ana",
        "verdicts": [{"element": "fg_jack", "decision": "regenerate"}]
    });
    let r = call(&app, Method::POST, &format!("/runs/{id}/approval"), Some(reject)).await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["open_gate"]["round"], 1);

    let page = call(&app, Method::GET, &format!("/runs/{id}/events?after=0"), None).await.json();
    let regenerated: Vec<_> =
        page["events"].as_array().unwrap().iter().filter(|e| e["kind"] == "regenerated").collect();
    assert_eq!(regenerated.len(), 1);
    assert_eq!(regenerated[0]["target"], "element:0:fg_jack");

    // Unknown element keys are refused.
    let bad = json!({"gate": "element", "actor": "ana", "verdicts": [{"element": "fg_nobody", "decision": "regenerate"}]});
    let r = call(&app, Method::POST, &format!("/runs/{id}/approval"), Some(bad)).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread")]
async fn finished_run_serves_artifacts_and_metrics() {
    let (_d, app) = app();
    let id = create(&app, &jack_config()).await;
    let view = wait_for(&app, &id, |p| p == "done" || p == "failed").await;
    assert_eq!(view["phase"], "done", "{view}");
    assert!(view["metrics"]["tis"].is_number());

    let path = view["scenes"][0]["final_image"].as_str().unwrap().to_string();
    let r = call(&app, Method::GET, &format!("/runs/{id}/artifacts/{path}"), None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.content_type.as_deref(), Some("image/png"));
    assert_eq!(&r.bytes[1..4], b"PNG");

    let r = call(&app, Method::GET, &format!("/runs/{id}/artifacts/report.json"), None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.content_type.as_deref(), Some("application/json"));

    for bad in ["..%2F..%2Fetc%2Fpasswd", "%2Fetc%2Fpasswd", "scene_0/../../x.png", "scene_0/nothing.png", "state.toml"] {
        let r = call(&app, Method::GET, &format!("/runs/{id}/artifacts/{bad}"), None).await;
        assert_eq!(r.status, StatusCode::NOT_FOUND, "{bad}");
    }

    let r = call(&app, Method::POST, &format!("/runs/{id}/evaluate"), Some(json!({}))).await;
    assert_eq!(r.status, StatusCode::OK);
    let metrics = r.json();
    assert_eq!(metrics["tis"], view["metrics"]["tis"]);
    let r = call(&app, Method::POST, &format!("/runs/{id}/evaluate"), Some(json!({"prompts": ["one"]}))).await;
    assert_eq!(r.status, StatusCode::CONFLICT);

    let list = call(&app, Method::GET, "/runs", None).await.json();
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["run_id"], id.as_str());
}

#[tokio::test(flavor = "multi_thread")]
async fn events_long_poll_from_a_cursor() {
    let (_d, app) = app();
    let id = create(&app, &manual_config()).await;
    wait_for(&app, &id, |p| p == Phase::AwaitingDescriptionFeedback.as_str()).await;
    let page = call(&app, Method::GET, &format!("/runs/{id}/events?after=0"), None).await.json();
    let events = page["events"].as_array().unwrap();
    assert!(!events.is_empty());
    let seqs: Vec<u64> = events.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, (1..=seqs.len() as u64).collect::<Vec<_>>());
    let last = page["last_seq"].as_u64().unwrap();
    assert_eq!(last, seqs.len() as u64);

    let started = Instant::now();
    let page = call(&app, Method::GET, &format!("/runs/{id}/events?after={last}&wait_ms=150"), None).await.json();
    assert!(started.elapsed() >= Duration::from_millis(150));
    assert!(page["events"].as_array().unwrap().is_empty());
    assert_eq!(page["last_seq"].as_u64().unwrap(), last);

    let page = call(&app, Method::GET, &format!("/runs/{id}/events?after={}", last - 2), None).await.json();
    assert_eq!(page["events"].as_array().unwrap().len(), 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn errors_map_to_status_codes() {
    let (_d, app) = app();
    let r = call(&app, Method::GET, "/runs/missing", None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.json()["error"], "unknown_run");
    let r = call(&app, Method::GET, "/runs/missing/events", None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = call(&app, Method::GET, "/runs/missing/artifacts/x.png", None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);

    let mut cfg = jack_config();
    cfg.backends.renderer = "sdxl".into();
    let r = call(&app, Method::POST, "/runs", Some(json!({"story": "Once.", "config": cfg}))).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["error"], "config_error");
    let r = call(&app, Method::POST, "/runs", Some(json!({"story": "   "}))).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert!(call(&app, Method::GET, "/runs", None).await.json().as_array().unwrap().is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn console_bundle_is_served_next_to_the_api() {
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html>console</html>").unwrap();
    let (_d, store) = temp_store();
    let app = router(Arc::new(deterministic(store)), Some(ui.path().to_path_buf()));
    let r = call(&app, Method::GET, "/index.html", None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.bytes, b"<html>console</html>");
    assert_eq!(call(&app, Method::GET, "/runs", None).await.status, StatusCode::OK);
}
