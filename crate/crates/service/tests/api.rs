use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use hiersample_service::responder::{Registry, Responder};
use hiersample_service::store::{BundleLine, ExportFilter, Reply, Role, Turn};
use hiersample_service::{router, Service, ServiceConfig, ServiceResult, Store};
use serde_json::{json, Value};
use tower::ServiceExt;

/// Replies with a digest of the history and seed, so any change in either shows.
struct Digest(&'static str);

impl Responder for Digest {
    fn reply(&self, history: &[Turn], seed: u64, rerank: bool) -> ServiceResult<Reply> {
        let mut h: u64 = seed ^ 0x9e37_79b9_7f4a_7c15;
        for t in history {
            for b in t.text.bytes().chain([t.speaker as u8]) {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
        }
        let humans = history.iter().filter(|t| t.speaker == Role::Human).count();
        Ok(Reply { text: format!("{} r{humans} {:x}{}", self.0, h & 0xffff, if rerank { " rr" } else { "" }), truncated: false })
    }

    fn supports_rerank(&self) -> bool {
        true
    }
}

fn registry() -> Registry {
    let mut r: Registry = HashMap::new();
    // reply prefixes deliberately differ from the ids so masking checks are meaningful
    r.insert("alpha-model".into(), Arc::new(Digest("left")) as Arc<dyn Responder>);
    r.insert("beta-model".into(), Arc::new(Digest("right")) as Arc<dyn Responder>);
    r
}

fn service(store: Store) -> Arc<Service> {
    Arc::new(Service::new(store, registry(), ServiceConfig { turn_limit: 10, seed: 5 }))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, String) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn create(app: &Router, body: Value) -> String {
    let (st, text) = call(app, Method::POST, "/sessions", Some(body)).await;
    assert_eq!(st, StatusCode::CREATED, "{text}");
    let v: Value = serde_json::from_str(&text).unwrap();
    v["session"]["id"].as_str().unwrap().to_string()
}

async fn say(app: &Router, id: &str, text: &str) -> (StatusCode, Value) {
    let (st, body) = call(app, Method::POST, &format!("/sessions/{id}/utterance"), Some(json!({ "text": text }))).await;
    (st, serde_json::from_str(&body).unwrap_or(Value::Null))
}

fn grades(annotator: &str, g: [u8; 3]) -> Value {
    json!({ "fluency": g[0], "non_repetition": g[1], "coherence": g[2], "annotator": annotator })
}

fn export_lines(text: &str) -> Vec<BundleLine> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[tokio::test]
async fn session_locks_after_ten_user_turns() {
    let app = router(service(Store::in_memory()));
    let id = create(&app, json!({ "models": ["alpha-model"] })).await;
    for k in 1..=10 {
        let (st, v) = say(&app, &id, &format!("hello {k}")).await;
        assert_eq!(st, StatusCode::OK);
        assert_eq!(v["human_turns"], k);
        assert_eq!(v["status"], if k < 10 { "open" } else { "complete" });
    }
    let (st, _) = say(&app, &id, "one more").await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, body) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(st, StatusCode::OK);
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["lanes"][0]["turns"].as_array().unwrap().len(), 20);
}

#[tokio::test]
async fn grades_outside_zero_to_two_are_rejected() {
    let app = router(service(Store::in_memory()));
    let id = create(&app, json!({ "models": ["alpha-model"], "prompt": "hi there" })).await;
    let uri = format!("/sessions/{id}/annotation");
    for bad in [[3, 0, 0], [0, 3, 0], [0, 0, 3], [255, 1, 1]] {
        let (st, body) = call(&app, Method::POST, &uri, Some(grades("ann1", bad))).await;
        assert_eq!(st, StatusCode::BAD_REQUEST, "{bad:?} {body}");
    }
    for ok in [[0, 0, 0], [1, 1, 1], [2, 2, 2]] {
        let (st, _) = call(&app, Method::POST, &uri, Some(grades("ann1", ok))).await;
        assert_eq!(st, StatusCode::CREATED);
    }
    let (st, _) = call(&app, Method::POST, &uri, Some(json!({ "fluency": 1, "non_repetition": 1, "coherence": 1, "annotator": " " }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn each_annotator_gets_a_record_and_resubmission_versions() {
    let svc = service(Store::in_memory());
    let app = router(svc.clone());
    let id = create(&app, json!({ "models": ["alpha-model"], "prompt": "hi" })).await;
    let uri = format!("/sessions/{id}/annotation");
    for a in ["ann1", "ann2", "ann3"] {
        let (st, body) = call(&app, Method::POST, &uri, Some(grades(a, [2, 1, 0]))).await;
        assert_eq!(st, StatusCode::CREATED);
        assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["version"], 1);
    }
    let (_, body) = call(&app, Method::POST, &uri, Some(grades("ann2", [1, 1, 1]))).await;
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["version"], 2);

    let store = svc.store.lock().await;
    assert_eq!(store.annotations().len(), 3);
    assert_eq!(store.annotation_history().len(), 4);
    let ann2 = store.annotations().into_iter().find(|a| a.annotator == "ann2").unwrap().clone();
    assert_eq!((ann2.version, ann2.fluency), (2, 1));
}

#[tokio::test]
async fn turn_scope_is_range_checked() {
    let app = router(service(Store::in_memory()));
    let id = create(&app, json!({ "models": ["alpha-model"], "prompt": "hi" })).await;
    let uri = format!("/sessions/{id}/annotation");
    let mut body = grades("ann1", [1, 1, 1]);
    body["scope"] = json!({ "kind": "turn", "index": 1 });
    assert_eq!(call(&app, Method::POST, &uri, Some(body.clone())).await.0, StatusCode::CREATED);
    body["scope"] = json!({ "kind": "turn", "index": 2 });
    assert_eq!(call(&app, Method::POST, &uri, Some(body)).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn side_by_side_never_shows_model_ids() {
    let app = router(service(Store::in_memory()));
    let mut payloads = Vec::new();
    let (st, body) =
        call(&app, Method::POST, "/sessions", Some(json!({ "models": ["alpha-model", "beta-model"], "mode": "side_by_side", "prompt": "hello" })))
            .await;
    assert_eq!(st, StatusCode::CREATED);
    let id = serde_json::from_str::<Value>(&body).unwrap()["session"]["id"].as_str().unwrap().to_string();
    payloads.push(body);
    for k in 0..3 {
        let (_, v) = say(&app, &id, &format!("turn {k}")).await;
        assert_eq!(v["replies"].as_array().unwrap().len(), 2);
        payloads.push(v.to_string());
    }
    payloads.push(call(&app, Method::GET, &format!("/sessions/{id}"), None).await.1);
    let uri = format!("/sessions/{id}/annotation");
    // side-by-side grades must name a lane
    assert_eq!(call(&app, Method::POST, &uri, Some(grades("ann1", [1, 1, 1]))).await.0, StatusCode::BAD_REQUEST);
    for lane in ["A", "B"] {
        let mut b = grades("ann1", [2, 1, 1]);
        b["lane"] = json!(lane);
        let (st, body) = call(&app, Method::POST, &uri, Some(b)).await;
        assert_eq!(st, StatusCode::CREATED);
        payloads.push(body);
    }
    let mut b = grades("ann1", [2, 1, 1]);
    b["lane"] = json!("C");
    assert_eq!(call(&app, Method::POST, &uri, Some(b)).await.0, StatusCode::BAD_REQUEST);
    payloads.push(call(&app, Method::GET, "/export", None).await.1);
    payloads.push(call(&app, Method::GET, &format!("/export?session={id}"), None).await.1);

    for p in &payloads {
        assert!(!p.contains("alpha-model") && !p.contains("beta-model"), "leak in {p}");
        assert!(!p.contains("lane_order"), "lane order leaked in {p}");
    }
    let (_, revealed) = call(&app, Method::GET, "/export?reveal=true", None).await;
    assert!(revealed.contains("alpha-model") && revealed.contains("beta-model"));
}

#[tokio::test]
async fn export_holds_twenty_turns_and_one_record_per_lane() {
    let app = router(service(Store::in_memory()));
    let id = create(&app, json!({ "models": ["alpha-model", "beta-model"], "mode": "side_by_side" })).await;
    for k in 0..10 {
        assert_eq!(say(&app, &id, &format!("u{k}")).await.0, StatusCode::OK);
    }
    for lane in ["A", "B"] {
        let mut b = grades("ann1", [1, 2, 1]);
        b["lane"] = json!(lane);
        assert_eq!(call(&app, Method::POST, &format!("/sessions/{id}/annotation"), Some(b)).await.0, StatusCode::CREATED);
    }
    let (st, text) = call(&app, Method::GET, "/export", None).await;
    assert_eq!(st, StatusCode::OK);
    let lines = export_lines(&text);
    let sessions: Vec<_> = lines.iter().filter_map(|l| if let BundleLine::Session(s) = l { Some(s) } else { None }).collect();
    let notes: Vec<_> = lines.iter().filter_map(|l| if let BundleLine::Annotation(a) = l { Some(a) } else { None }).collect();
    assert_eq!(sessions.len(), 1);
    for lane in &sessions[0].lanes {
        assert_eq!(lane.turns.len(), 20);
        assert_eq!(notes.iter().filter(|a| a.lane.as_deref() == Some(lane.label.as_str())).count(), 1);
    }
}

#[tokio::test]
async fn revealed_export_round_trips_through_import() {
    let svc = service(Store::in_memory());
    let app = router(svc.clone());
    let a = create(&app, json!({ "models": ["alpha-model"], "prompt": "first" })).await;
    let b = create(&app, json!({ "models": ["alpha-model", "beta-model"], "mode": "side_by_side", "prompt": "second" })).await;
    say(&app, &a, "more").await;
    call(&app, Method::POST, &format!("/sessions/{a}/annotation"), Some(grades("x", [1, 1, 1]))).await;
    call(&app, Method::POST, &format!("/sessions/{a}/annotation"), Some(grades("x", [2, 2, 2]))).await;
    let mut g = grades("y", [0, 1, 2]);
    g["lane"] = json!("B");
    call(&app, Method::POST, &format!("/sessions/{b}/annotation"), Some(g)).await;
    call(&app, Method::POST, &format!("/sessions/{b}/close"), None).await;

    let (_, text) = call(&app, Method::GET, "/export?reveal=true", None).await;
    let imported = Store::import_jsonl(&text).unwrap();
    assert!(imported == *svc.store.lock().await);
    assert_eq!(imported.export_jsonl(&ExportFilter { reveal: true, ..Default::default() }), text);

    let (_, blinded) = call(&app, Method::GET, "/export", None).await;
    assert!(Store::import_jsonl(&blinded).is_err());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn fifty_concurrent_sessions_of_ten_turns() {
    let svc = service(Store::in_memory());
    let app = router(svc.clone());
    let mut handles = Vec::new();
    for s in 0..50 {
        let app = app.clone();
        handles.push(tokio::spawn(async move {
            let id = create(&app, json!({ "models": ["alpha-model"], "seed": s })).await;
            for k in 0..10 {
                let (st, _) = say(&app, &id, &format!("session {s} turn {k}")).await;
                assert_eq!(st, StatusCode::OK);
            }
            id
        }));
    }
    let mut ids = Vec::new();
    for h in handles {
        ids.push(h.await.unwrap());
    }
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 50);
    let store = svc.store.lock().await;
    let humans: usize = store.sessions().map(|s| s.lanes[0].turns.iter().filter(|t| t.speaker == Role::Human).count()).sum();
    assert_eq!(humans, 500);
    assert!(store.sessions().all(|s| s.human_turns == 10));
}

#[tokio::test]
async fn log_replays_to_the_same_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.jsonl");
    let svc = service(Store::open(&path).unwrap());
    let app = router(svc.clone());
    let id = create(&app, json!({ "models": ["alpha-model", "beta-model"], "mode": "side_by_side", "prompt": "p" })).await;
    say(&app, &id, "again").await;
    let mut g = grades("ann", [1, 0, 2]);
    g["lane"] = json!("A");
    call(&app, Method::POST, &format!("/sessions/{id}/annotation"), Some(g)).await;
    let before = svc.export(&ExportFilter { reveal: true, ..Default::default() }).await;
    drop(app);
    drop(svc);

    let svc = service(Store::open(&path).unwrap());
    assert_eq!(svc.export(&ExportFilter { reveal: true, ..Default::default() }).await, before);
    // the reloaded store keeps appending
    let app = router(svc.clone());
    let (st, v) = say(&app, &id, "after reload").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["human_turns"], 3);
    let again = Store::open(&path).unwrap();
    assert_eq!(again.session(&id).unwrap().human_turns, 3);
}

#[tokio::test]
async fn replies_are_a_function_of_seed_and_history() {
    let run = || async {
        let app = router(service(Store::in_memory()));
        let id = create(&app, json!({ "models": ["alpha-model", "beta-model"], "mode": "side_by_side", "seed": 42 })).await;
        let mut out = Vec::new();
        for k in 0..4 {
            out.push(say(&app, &id, &format!("u{k}")).await.1);
        }
        out
    };
    assert_eq!(run().await, run().await);
}

#[tokio::test]
async fn retried_turn_id_is_applied_once() {
    let app = router(service(Store::in_memory()));
    let id = create(&app, json!({ "models": ["alpha-model"] })).await;
    let uri = format!("/sessions/{id}/utterance");
    let body = json!({ "text": "hello", "turn_id": "t-1" });
    let (_, first) = call(&app, Method::POST, &uri, Some(body.clone())).await;
    let (_, retry) = call(&app, Method::POST, &uri, Some(body)).await;
    assert_eq!(first, retry);
    assert_eq!(serde_json::from_str::<Value>(&retry).unwrap()["human_turns"], 1);
}

#[tokio::test]
async fn error_statuses() {
    let app = router(service(Store::in_memory()));
    assert_eq!(call(&app, Method::GET, "/sessions/s999999", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, Method::POST, "/sessions", Some(json!({ "models": ["nope"] }))).await.0, StatusCode::BAD_REQUEST);
    let two_for_single = json!({ "models": ["alpha-model", "beta-model"] });
    assert_eq!(call(&app, Method::POST, "/sessions", Some(two_for_single)).await.0, StatusCode::BAD_REQUEST);
    let id = create(&app, json!({ "models": ["alpha-model"] })).await;
    assert_eq!(say(&app, &id, "   ").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, Method::POST, &format!("/sessions/{id}/close"), None).await.0, StatusCode::OK);
    assert_eq!(say(&app, &id, "closed now").await.0, StatusCode::CONFLICT);
    let (st, _) = call(&app, Method::POST, "/sessions", Some(json!({ "models": ["alpha-model"], "extra": 1 }))).await;
    assert!(st.is_client_error());
}
