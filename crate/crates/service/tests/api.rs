use std::path::{Path, PathBuf};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use qnet_core::control::{ControlConfig, ControlEvent, RequestState};
use qnet_core::physics::profiles::Profile;
use qnet_core::topology::load_topology;
use qnet_service::{FileStore, RequestStatus, Service, ServiceConfig, ServiceEvent, TokenTable};
use serde_json::{json, Value};
use tower::ServiceExt;

const OPERATOR: &str = "operator-token";
const ALICE: &str = "alice-token";
const VIEWER: &str = "viewer-token";

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn start(data_dir: Option<&Path>, time_scale: Option<f64>) -> Service {
    let dir = config_dir();
    let topology =
        load_topology(&std::fs::read_to_string(dir.join("topology.toml")).unwrap()).unwrap();
    Service::start(ServiceConfig {
        topology,
        profile: Profile::builtin("qlan2_coexist").unwrap(),
        control: ControlConfig::default(),
        tokens: TokenTable::load(&dir.join("tokens.toml")).unwrap(),
        data_dir: data_dir.map(Path::to_path_buf),
        time_scale,
        seed: 7,
    })
    .unwrap()
}

async fn call(
    app: &Router,
    method: Method,
    path: &str,
    token: Option<&str>,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(path);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn get(app: &Router, path: &str, token: &str) -> (StatusCode, Value) {
    call(app, Method::GET, path, Some(token), None).await
}

async fn wait_ready(app: &Router) {
    for _ in 0..500 {
        let (_, h) = call(app, Method::GET, "/v1/health", None, None).await;
        if h["status"] == "ready" {
            return;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("discovery never finished");
}

fn submission(rate: f64, duration: f64) -> Value {
    json!({
        "qnode_a": "fnal-q1",
        "qnode_b": "fnal-q2",
        "requirements": { "qubit_type": "time_bin", "rate": rate, "duration": duration }
    })
}

async fn submit(app: &Router, rate: f64, duration: f64) -> u64 {
    let (status, body) = call(
        app,
        Method::POST,
        "/v1/requests",
        Some(ALICE),
        Some(submission(rate, duration)),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["id"].as_u64().unwrap()
}

async fn wait_terminal(app: &Router, id: u64) -> RequestStatus {
    for _ in 0..3000 {
        let (_, body) = get(app, &format!("/v1/requests/{id}"), VIEWER).await;
        let status: RequestStatus = serde_json::from_value(body).unwrap();
        if status.state.is_terminal() {
            return status;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("request {id} never finished");
}

/// Reads SSE frames until `done` accepts an event or the timeout passes.
async fn read_events(
    app: &Router,
    query: &str,
    done: impl Fn(&ServiceEvent) -> bool,
) -> Vec<ServiceEvent> {
    let req = Request::builder()
        .uri(format!("/v1/events{query}"))
        .header("authorization", format!("Bearer {VIEWER}"))
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let mut body = resp.into_body();
    let mut text = String::new();
    let mut out = Vec::new();
    loop {
        let frame = tokio::time::timeout(Duration::from_secs(20), body.frame())
            .await
            .expect("event stream stalled")
            .expect("stream ended")
            .unwrap();
        let Ok(data) = frame.into_data() else {
            continue;
        };
        text.push_str(std::str::from_utf8(&data).unwrap());
        while let Some(end) = text.find("\n\n") {
            let block: String = text.drain(..end + 2).collect();
            let Some(line) = block.lines().find_map(|l| l.strip_prefix("data:")) else {
                continue;
            };
            let ev: ServiceEvent = serde_json::from_str(line.trim()).unwrap();
            let stop = done(&ev);
            out.push(ev);
            if stop {
                return out;
            }
        }
    }
}

fn is_terminal_transition(ev: &ServiceEvent) -> bool {
    matches!(&ev.event, ControlEvent::Transition { to, .. } if to.is_terminal())
}

#[tokio::test]
async fn health_needs_no_token() {
    let svc = start(None, None);
    let app = svc.router();
    let (status, body) = call(&app, Method::GET, "/v1/health", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body["status"].is_string());
    svc.shutdown();
}

#[tokio::test]
async fn auth_reports_session_and_rejects_unknown_tokens() {
    let svc = start(None, None);
    let app = svc.router();
    let (status, body) = call(&app, Method::POST, "/v1/auth", Some(ALICE), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["subject"], "alice");
    assert_eq!(body["scopes"], json!(["submit", "read"]));
    let (status, body) = call(&app, Method::POST, "/v1/auth", Some("forged"), None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(body["code"], "unauthorized");
    assert!(body["message"].is_string());
    svc.shutdown();
}

#[tokio::test]
async fn topology_matches_verified_plant() {
    let svc = start(None, None);
    let app = svc.router();
    let (status, _) = call(&app, Method::GET, "/v1/topology", None, None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    wait_ready(&app).await;
    let (status, body) = get(&app, "/v1/topology", VIEWER).await;
    assert_eq!(status, StatusCode::OK);
    let file = load_topology(&std::fs::read_to_string(config_dir().join("topology.toml")).unwrap())
        .unwrap();
    assert_eq!(body["nodes"].as_array().unwrap().len(), file.node_count());
    assert_eq!(body["links"].as_array().unwrap().len(), file.link_count());
    assert!(body["version"].as_u64().unwrap() >= 1);
    assert!(load_topology(body["document"].as_str().unwrap()).is_ok());
    svc.shutdown();
}

#[tokio::test]
async fn submission_errors() {
    let svc = start(None, None);
    let app = svc.router();
    wait_ready(&app).await;

    let (status, body) = call(
        &app,
        Method::POST,
        "/v1/requests",
        None,
        Some(submission(10.0, 1.0)),
    )
    .await;
    assert_eq!(
        (status, body["code"].as_str()),
        (StatusCode::UNAUTHORIZED, Some("unauthorized"))
    );
    let (status, body) = call(
        &app,
        Method::POST,
        "/v1/requests",
        Some(VIEWER),
        Some(submission(10.0, 1.0)),
    )
    .await;
    assert_eq!(
        (status, body["code"].as_str()),
        (StatusCode::FORBIDDEN, Some("forbidden"))
    );

    let mut unknown = submission(10.0, 1.0);
    unknown["qnode_b"] = json!("nowhere");
    let (status, body) = call(
        &app,
        Method::POST,
        "/v1/requests",
        Some(ALICE),
        Some(unknown),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["message"].as_str().unwrap().contains("nowhere"));

    let (status, body) = call(
        &app,
        Method::POST,
        "/v1/requests",
        Some(ALICE),
        Some(submission(10.0, 0.0)),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["fields"], json!(["duration"]));

    let (status, _) = call(
        &app,
        Method::POST,
        "/v1/requests",
        Some(ALICE),
        Some(json!({"qnode_a": "fnal-q1"})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (_, list) = get(&app, "/v1/requests", VIEWER).await;
    assert_eq!(
        list,
        json!([]),
        "rejected submissions must not create records"
    );

    let (status, _) = get(&app, "/v1/requests/99", VIEWER).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = get(&app, "/v1/requests/abc/measurements", VIEWER).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    svc.shutdown();
}

#[tokio::test]
async fn request_lifecycle_and_measurements() {
    // Five simulated seconds per wall second keeps the request live long
    // enough to observe the conflict.
    let svc = start(None, Some(5.0));
    let app = svc.router();
    wait_ready(&app).await;
    let id = submit(&app, 50.0, 3.0).await;
    let (status, body) = get(&app, &format!("/v1/requests/{id}"), VIEWER).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["user"], "alice");
    let (status, body) = get(&app, &format!("/v1/requests/{id}/measurements"), VIEWER).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "not_terminal");

    let done = wait_terminal(&app, id).await;
    assert_eq!(done.state, RequestState::Completed);
    assert!(done.finished_at.unwrap() > done.submitted_at);
    let (status, record) = get(&app, &format!("/v1/requests/{id}/measurements"), VIEWER).await;
    assert_eq!(status, StatusCode::OK);
    assert!(!record["rows"].as_array().unwrap().is_empty());
    assert!(record["physics"]["records"].as_u64().unwrap() > 0);
    svc.shutdown();
}

#[tokio::test]
async fn event_stream_follows_lifecycle_and_resumes() {
    let svc = start(None, None);
    let app = svc.router();
    wait_ready(&app).await;
    let id = submit(&app, 100.0, 2.0).await;
    let events = read_events(&app, &format!("?request={id}"), is_terminal_transition).await;
    let mut states = Vec::new();
    for w in events.windows(2) {
        assert!(w[0].seq < w[1].seq, "stream out of order");
    }
    for e in &events {
        assert_eq!(e.request().unwrap().0, id);
        if let ControlEvent::Transition { to, .. } = e.event {
            states.push(to);
        }
    }
    use RequestState::*;
    assert_eq!(
        states,
        vec![
            Submitted,
            Analyzing,
            PathsEstablished,
            Verifying,
            Calibrating,
            Ready,
            Distributing,
            Completed
        ]
    );
    assert!(events
        .iter()
        .any(|e| matches!(e.event, ControlEvent::Measurement { .. })));

    // The unfiltered stream is gapless and resumes right after the cursor.
    let all = read_events(&app, "", is_terminal_transition).await;
    for (i, e) in all.iter().enumerate() {
        assert_eq!(e.seq, i as u64 + 1);
    }
    let k = all.len() as u64 / 2;
    let resumed = read_events(&app, &format!("?cursor={k}"), |_| true).await;
    assert_eq!(resumed[0].seq, k + 1);
    assert_eq!(resumed[0], all[k as usize]);

    let (status, body) = get(&app, "/v1/events?cursor=999999", VIEWER).await;
    assert_eq!(
        (status, body["code"].as_str()),
        (StatusCode::BAD_REQUEST, Some("invalid_cursor"))
    );
    let (status, _) = get(&app, "/v1/events?cursor=-3", VIEWER).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = get(&app, "/v1/events?request=4242", VIEWER).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    svc.shutdown();
}

#[tokio::test]
async fn every_call_is_audited_once() {
    let svc = start(None, None);
    let app = svc.router();
    wait_ready(&app).await;
    let calls: Vec<(Method, &str, Option<&str>, u16)> = vec![
        (Method::GET, "/v1/topology", Some(VIEWER), 200),
        (Method::GET, "/v1/topology", None, 401),
        (Method::POST, "/v1/requests", Some(VIEWER), 403),
        (Method::POST, "/v1/topology", Some(ALICE), 403),
        (Method::GET, "/v1/requests", Some("bogus"), 401),
        (Method::POST, "/v1/auth", Some(OPERATOR), 200),
    ];
    for (m, path, token, expect) in &calls {
        let body = (*m == Method::POST).then(|| submission(1.0, 1.0));
        let (status, _) = call(&app, m.clone(), path, *token, body).await;
        assert_eq!(status.as_u16(), *expect, "{m} {path}");
    }
    let (status, body) = get(&app, "/v1/audit", OPERATOR).await;
    assert_eq!(status, StatusCode::OK);
    let records = body.as_array().unwrap();
    assert_eq!(records.len(), calls.len());
    for (r, (m, path, token, expect)) in records.iter().zip(&calls) {
        assert_eq!(r["action"], m.as_str());
        assert_eq!(r["target"], *path);
        assert_eq!(r["outcome"], *expect);
        let subject = match *token {
            Some(VIEWER) => "viewer",
            Some(ALICE) => "alice",
            Some(OPERATOR) => "operator",
            _ => "anonymous",
        };
        assert_eq!(r["subject"], subject);
    }
    let (status, _) = get(&app, "/v1/audit", ALICE).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    svc.shutdown();
}

#[tokio::test]
async fn records_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (id, before, events_before) = {
        let svc = start(Some(dir.path()), None);
        let app = svc.router();
        wait_ready(&app).await;
        let id = submit(&app, 100.0, 2.0).await;
        wait_terminal(&app, id).await;
        let (status, record) = get(&app, &format!("/v1/requests/{id}/measurements"), VIEWER).await;
        assert_eq!(status, StatusCode::OK);
        let (_, h) = call(&app, Method::GET, "/v1/health", None, None).await;
        svc.shutdown();
        (id, record, h["latest_seq"].as_u64().unwrap())
    };
    let svc = start(Some(dir.path()), None);
    let app = svc.router();
    let (status, after) = get(&app, &format!("/v1/requests/{id}/measurements"), VIEWER).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(before, after);
    let (_, status) = get(&app, &format!("/v1/requests/{id}"), VIEWER).await;
    assert_eq!(status["status"], "Completed");

    // New ids and event sequence numbers continue from the earlier run.
    wait_ready(&app).await;
    let next = submit(&app, 10.0, 1.0).await;
    assert!(next > id);
    let events = read_events(&app, &format!("?cursor={events_before}"), |_| true).await;
    assert_eq!(events[0].seq, events_before + 1);
    svc.shutdown();
    assert!(dir.path().join(qnet_service::AUDIT_FILE).exists());
}

#[tokio::test]
async fn shutdown_leaves_no_request_live() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let svc = start(Some(dir.path()), Some(1.0));
        let app = svc.router();
        wait_ready(&app).await;
        let id = submit(&app, 10.0, 1000.0).await;
        svc.shutdown();
        id
    };
    let svc = start(Some(dir.path()), None);
    let app = svc.router();
    let (_, body) = get(&app, &format!("/v1/requests/{id}"), VIEWER).await;
    assert_eq!(body["status"], "Failed(interrupted)");
    let (status, _) = get(&app, &format!("/v1/requests/{id}/measurements"), VIEWER).await;
    assert_eq!(status, StatusCode::OK);
    svc.shutdown();
}

#[tokio::test]
async fn crashed_run_is_recovered_as_interrupted() {
    let dir = tempfile::tempdir().unwrap();
    // Leave a journal behind as a killed process would: the request is
    // mid-flight and nothing marked it finished.
    let live = {
        let svc = start(Some(dir.path()), Some(1.0));
        let app = svc.router();
        wait_ready(&app).await;
        let id = submit(&app, 10.0, 1000.0).await;
        let (_, body) = get(&app, &format!("/v1/requests/{id}"), VIEWER).await;
        let status: RequestStatus = serde_json::from_value(body).unwrap();
        svc.shutdown();
        status
    };
    std::fs::remove_file(dir.path().join(qnet_service::STORE_FILE)).unwrap();
    {
        let mut store = FileStore::open(&dir.path().join(qnet_service::STORE_FILE)).unwrap();
        store.put_request(live.clone()).unwrap();
    }
    let svc = start(Some(dir.path()), None);
    let app = svc.router();
    let (_, body) = get(&app, &format!("/v1/requests/{}", live.id), VIEWER).await;
    assert_eq!(body["status"], "Failed(interrupted)");
    let (status, record) = get(
        &app,
        &format!("/v1/requests/{}/measurements", live.id),
        VIEWER,
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(record["state"]["reason"], "interrupted");
    let events = read_events(&app, "", |_| true).await;
    assert!(matches!(
        events[0].event,
        ControlEvent::Transition {
            to: RequestState::Failed(_),
            ..
        }
    ));
    svc.shutdown();
}

#[tokio::test]
async fn topology_snapshots_are_never_mixed() {
    let svc = start(None, None);
    let app = svc.router();
    wait_ready(&app).await;
    let (_, before) = get(&app, "/v1/topology", VIEWER).await;
    let v0 = before["version"].as_u64().unwrap();
    let has_link = |t: &Value| {
        t["links"]
            .as_array()
            .unwrap()
            .iter()
            .any(|l| l["id"] == "nu-sl")
    };

    let reader = {
        let app = app.clone();
        tokio::spawn(async move {
            let mut seen = Vec::new();
            for _ in 0..200 {
                let (_, t) = get(&app, "/v1/topology", VIEWER).await;
                seen.push(t);
                tokio::task::yield_now().await;
            }
            seen
        })
    };
    let (status, body) = call(
        &app,
        Method::POST,
        "/v1/topology",
        Some(OPERATOR),
        Some(json!({"type": "link_down", "link": "nu-sl"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    for t in reader.await.unwrap() {
        let v = t["version"].as_u64().unwrap();
        assert_eq!(
            has_link(&t),
            v == v0,
            "version {v} inconsistent with its link set"
        );
    }
    for _ in 0..500 {
        let (_, t) = get(&app, "/v1/topology", VIEWER).await;
        if t["version"].as_u64().unwrap() > v0 {
            assert!(!has_link(&t));
            svc.shutdown();
            return;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("topology change never applied");
}

#[test]
fn bad_token_file_is_refused() {
    let err = TokenTable::parse("[[tokens]]\ntoken = \"\"\nsubject = \"x\"\nscopes = [\"read\"]\n")
        .unwrap_err();
    assert!(err.to_string().contains("empty token"));
}
