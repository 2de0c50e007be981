//! HTTP routes.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use futures::Stream;
use qnet_core::control::agent::DeltaError;
use qnet_core::control::{RequestSpec, Requirements, SubmitError, TopologyDelta};
use qnet_core::{NodeId, RequestId};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::{oneshot, watch};

use crate::audit::AuditLog;
use crate::auth::{Scope, Session, TokenTable};
use crate::engine::{Command, DiscoveryStatus, EngineHandle, Shared};
use crate::model::ServiceEvent;

pub struct AppInner {
    pub tokens: TokenTable,
    pub audit: AuditLog,
    pub shared: Arc<Shared>,
    pub engine: std::sync::Mutex<EngineHandle>,
    pub closing: watch::Sender<bool>,
}

pub type AppState = Arc<AppInner>;

/// Error body carried by every non-2xx response.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    fields: Vec<&'static str>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            fields: Vec::new(),
        }
    }

    fn unauthorized() -> Self {
        Self::new(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing or unknown bearer token",
        )
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", what)
    }

    fn engine_gone() -> Self {
        Self::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "unavailable",
            "control plane is shutting down",
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "code": self.code, "message": self.message });
        if !self.fields.is_empty() {
            body["fields"] = json!(self.fields);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// The caller's session, if the bearer token was recognised.
#[derive(Debug, Clone)]
struct Caller(Option<Session>);

impl Caller {
    fn require(self, scope: Scope) -> ApiResult<Session> {
        let session = self.0.ok_or_else(ApiError::unauthorized)?;
        if !session.allows(scope) {
            return Err(ApiError::new(
                StatusCode::FORBIDDEN,
                "forbidden",
                format!("`{}` lacks the {} scope", session.subject, scope.as_str()),
            ));
        }
        Ok(session)
    }
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    let value = headers
        .get(axum::http::header::AUTHORIZATION)?
        .to_str()
        .ok()?;
    let (scheme, token) = value.split_once(' ')?;
    scheme.eq_ignore_ascii_case("bearer").then(|| token.trim())
}

/// Resolves the caller and writes exactly one audit record per call.
async fn authenticate(State(st): State<AppState>, mut req: Request, next: Next) -> Response {
    let session = bearer(req.headers())
        .and_then(|t| st.tokens.lookup(t))
        .cloned();
    let subject = session
        .as_ref()
        .map_or_else(|| "anonymous".to_owned(), |s| s.subject.clone());
    let action = req.method().to_string();
    let target = req.uri().path().to_owned();
    req.extensions_mut().insert(Caller(session));
    let response = next.run(req).await;
    st.audit
        .append(&subject, &action, &target, response.status().as_u16());
    response
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/v1/auth", post(auth))
        .route("/v1/topology", get(topology).post(topology_change))
        .route("/v1/requests", get(list_requests).post(submit))
        .route("/v1/requests/{id}", get(request_status))
        .route("/v1/requests/{id}/measurements", get(measurements))
        .route("/v1/events", get(events))
        .route("/v1/audit", get(audit))
        .layer(middleware::from_fn_with_state(state.clone(), authenticate));
    Router::new()
        .route("/v1/health", get(health))
        .merge(api)
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state)
}

async fn health(State(st): State<AppState>) -> Json<serde_json::Value> {
    let snap = st.shared.snapshot.read().expect("snapshot lock");
    let status = match snap.discovery {
        DiscoveryStatus::Done => "ready",
        DiscoveryStatus::Running => "starting",
        DiscoveryStatus::Failed => "degraded",
    };
    Json(json!({
        "status": status,
        "discovery": snap.discovery,
        "sim_time": snap.sim_time,
        "topology_version": snap.topology.as_ref().map(|t| t.version),
        "requests": snap.requests.len(),
        "latest_seq": st.shared.latest_seq(),
    }))
}

async fn auth(Extension(caller): Extension<Caller>) -> ApiResult<Json<Session>> {
    Ok(Json(caller.0.ok_or_else(ApiError::unauthorized)?))
}

async fn topology(
    State(st): State<AppState>,
    Extension(caller): Extension<Caller>,
) -> ApiResult<Response> {
    caller.require(Scope::Read)?;
    let view = st
        .shared
        .snapshot
        .read()
        .expect("snapshot lock")
        .topology
        .clone();
    match view {
        Some(v) => Ok(Json(v.as_ref()).into_response()),
        None => Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "not_ready",
            "topology discovery has not completed",
        )),
    }
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", e.to_string())
            }
            _ => ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()),
        }
    })
}

async fn topology_change(
    State(st): State<AppState>,
    Extension(caller): Extension<Caller>,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    caller.require(Scope::Admin)?;
    let delta: TopologyDelta = parse_body(&body)?;
    let (tx, rx) = oneshot::channel();
    if !st
        .engine
        .lock()
        .expect("engine lock")
        .send(Command::Delta(delta, tx))
    {
        return Err(ApiError::engine_gone());
    }
    match rx.await.map_err(|_| ApiError::engine_gone())? {
        Ok(version) => Ok(Json(json!({ "accepted": true, "version": version }))),
        Err(e @ (DeltaError::UnknownLink(_) | DeltaError::UnknownNode(_))) => {
            Err(ApiError::not_found(e.to_string()))
        }
        Err(e @ DeltaError::Exists(_)) => Err(ApiError::new(
            StatusCode::CONFLICT,
            "conflict",
            e.to_string(),
        )),
        Err(e @ DeltaError::BadLoss) => Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid",
            e.to_string(),
        )),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmitBody {
    qnode_a: NodeId,
    qnode_b: NodeId,
    requirements: Requirements,
}

async fn submit(
    State(st): State<AppState>,
    Extension(caller): Extension<Caller>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<crate::model::RequestStatus>)> {
    let session = caller.require(Scope::Submit)?;
    let body: SubmitBody = parse_body(&body)?;
    let bad = body.requirements.invalid_fields();
    if !bad.is_empty() {
        return Err(invalid_fields(bad));
    }
    let spec = RequestSpec {
        user: session.subject,
        qnode_a: body.qnode_a,
        qnode_b: body.qnode_b,
        requirements: body.requirements,
    };
    let (tx, rx) = oneshot::channel();
    if !st
        .engine
        .lock()
        .expect("engine lock")
        .send(Command::Submit(spec, tx))
    {
        return Err(ApiError::engine_gone());
    }
    match rx.await.map_err(|_| ApiError::engine_gone())? {
        Ok(status) => Ok((StatusCode::CREATED, Json(status))),
        Err(SubmitError::UnknownNode(n)) => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown_qnode",
            format!("unknown Q-node `{n}`"),
        )),
        Err(SubmitError::Invalid(fields)) => Err(invalid_fields(fields)),
        Err(e @ SubmitError::NoTopology) => Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "not_ready",
            e.to_string(),
        )),
    }
}

fn invalid_fields(fields: Vec<&'static str>) -> ApiError {
    let mut e = ApiError::new(
        StatusCode::UNPROCESSABLE_ENTITY,
        "invalid_requirements",
        format!("invalid requirements: {}", fields.join(", ")),
    );
    e.fields = fields;
    e
}

async fn list_requests(
    State(st): State<AppState>,
    Extension(caller): Extension<Caller>,
) -> ApiResult<Json<Vec<crate::model::RequestStatus>>> {
    caller.require(Scope::Read)?;
    let snap = st.shared.snapshot.read().expect("snapshot lock");
    Ok(Json(snap.requests.values().cloned().collect()))
}

fn parse_id(raw: &str) -> ApiResult<RequestId> {
    raw.parse::<u64>()
        .map(RequestId)
        .map_err(|_| ApiError::not_found(format!("no request `{raw}`")))
}

async fn request_status(
    State(st): State<AppState>,
    Extension(caller): Extension<Caller>,
    Path(raw): Path<String>,
) -> ApiResult<Json<crate::model::RequestStatus>> {
    caller.require(Scope::Read)?;
    let id = parse_id(&raw)?;
    let snap = st.shared.snapshot.read().expect("snapshot lock");
    snap.requests
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no request `{raw}`")))
}

async fn measurements(
    State(st): State<AppState>,
    Extension(caller): Extension<Caller>,
    Path(raw): Path<String>,
) -> ApiResult<Response> {
    caller.require(Scope::Read)?;
    let id = parse_id(&raw)?;
    let status = st
        .shared
        .snapshot
        .read()
        .expect("snapshot lock")
        .requests
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("no request `{raw}`")))?;
    if !status.state.is_terminal() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "not_terminal",
            format!(
                "request {id} is {}; measurements are available once it finishes",
                status.status
            ),
        ));
    }
    let record = status.record_id.as_deref().and_then(|rid| {
        st.shared
            .store
            .lock()
            .expect("store lock")
            .record(rid)
            .cloned()
    });
    match record {
        Some(r) => Ok(Json(r).into_response()),
        None => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "no_record",
            format!("request {id} finished without a stored record"),
        )),
    }
}

#[derive(Debug, Deserialize)]
struct EventQuery {
    cursor: Option<u64>,
    request: Option<u64>,
}

struct StreamState {
    after: u64,
    filter: Option<RequestId>,
    buf: VecDeque<ServiceEvent>,
    seq: watch::Receiver<u64>,
    closing: watch::Receiver<bool>,
    shared: Arc<Shared>,
}

fn sse_event(e: &ServiceEvent) -> Event {
    Event::default()
        .id(e.seq.to_string())
        .event(e.kind())
        .data(serde_json::to_string(e).expect("serializable"))
}

async fn events(
    State(st): State<AppState>,
    Extension(caller): Extension<Caller>,
    headers: HeaderMap,
    query: Result<Query<EventQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    caller.require(Scope::Read)?;
    let Query(q) = query
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_cursor", e.body_text()))?;
    let resume = headers
        .get("last-event-id")
        .map(|v| {
            v.to_str()
                .ok()
                .and_then(|s| s.trim().parse::<u64>().ok())
                .ok_or_else(|| {
                    ApiError::new(
                        StatusCode::BAD_REQUEST,
                        "invalid_cursor",
                        "Last-Event-ID is not a sequence number",
                    )
                })
        })
        .transpose()?;
    let after = q.cursor.or(resume).unwrap_or(0);
    let latest = st.shared.latest_seq();
    if after > latest {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_cursor",
            format!("cursor {after} is past the newest event {latest}"),
        ));
    }
    let filter = q.request.map(RequestId);
    if let Some(id) = filter {
        if !st
            .shared
            .snapshot
            .read()
            .expect("snapshot lock")
            .requests
            .contains_key(&id)
        {
            return Err(ApiError::not_found(format!("no request `{id}`")));
        }
    }
    let state = StreamState {
        after,
        filter,
        buf: VecDeque::new(),
        seq: st.shared.latest_seq.subscribe(),
        closing: st.closing.subscribe(),
        shared: st.shared.clone(),
    };
    let stream = futures::stream::unfold(state, |mut s| async move {
        loop {
            if let Some(e) = s.buf.pop_front() {
                return Some((Ok(sse_event(&e)), s));
            }
            if *s.closing.borrow() {
                return None;
            }
            s.seq.borrow_and_update();
            let batch = s.shared.events_after(s.after, 512);
            if let Some(last) = batch.last() {
                s.after = last.seq;
                s.buf.extend(
                    batch
                        .into_iter()
                        .filter(|e| s.filter.is_none() || e.request() == s.filter),
                );
                continue;
            }
            tokio::select! {
                r = s.seq.changed() => if r.is_err() { return None },
                _ = s.closing.changed() => {}
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}

async fn audit(
    State(st): State<AppState>,
    Extension(caller): Extension<Caller>,
) -> ApiResult<Json<Vec<crate::audit::AuditRecord>>> {
    caller.require(Scope::Admin)?;
    Ok(Json(st.audit.records()))
}
