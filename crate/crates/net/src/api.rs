//! The IWP's local HTTP API used by the console and avatar front ends.
//!
//! Every route except `/health` needs `Authorization: Bearer <token>` with
//! a token paired to a household member.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use base64::Engine;
use bytes::Bytes;
use cfas_core::model::{visibility_summary, OptionChange, PolicyError, Role};
use cfas_core::notify::{ChannelClosed, FlagError, FlagReport, PushChannel, PushMessage};
use cfas_core::TrafficEvent;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;
use tokio_stream::wrappers::ReceiverStream;
use tokio_stream::StreamExt;

use crate::iwp::{Iwp, IwpError};

const MAX_BODY: usize = 32 << 20;
const STREAM_BUFFER: usize = 512;
const REPLAY_DEPTH: usize = 256;

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({"error": self.1}))).into_response()
    }
}

impl From<IwpError> for ApiError {
    fn from(e: IwpError) -> Self {
        let status = match &e {
            IwpError::Forbidden(_) => StatusCode::FORBIDDEN,
            IwpError::NotFound(_) | IwpError::Flag(FlagError::UnknownTarget(_)) => StatusCode::NOT_FOUND,
            IwpError::Policy(PolicyError::Store(_)) | IwpError::Flag(FlagError::Store(_)) | IwpError::Dal(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            IwpError::Policy(_) | IwpError::Flag(_) | IwpError::Bundle(_) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError(status, e.to_string())
    }
}

fn unauthorized() -> ApiError {
    ApiError(StatusCode::UNAUTHORIZED, "missing or unknown token".into())
}

fn forbidden(msg: &str) -> ApiError {
    ApiError(StatusCode::FORBIDDEN, msg.into())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

type S = State<Arc<Iwp>>;

/// The authenticated member and their role.
struct Caller {
    member_id: String,
    role: Role,
}

fn caller(iwp: &Iwp, headers: &HeaderMap) -> Result<Caller, ApiError> {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or_else(unauthorized)?;
    let member_id = iwp.member_for_token(token).ok_or_else(unauthorized)?;
    let role = iwp.role_of(&member_id).ok_or_else(unauthorized)?;
    Ok(Caller { member_id, role })
}

async fn health(State(iwp): S) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "ok": true,
        "detector_version": iwp.detector_version(),
        "avatar": iwp.liveness(),
    }))
}

async fn policy(State(iwp): S, headers: HeaderMap) -> Result<Response, ApiError> {
    caller(&iwp, &headers)?;
    let state = blocking(move || iwp.policy()).await??;
    let now = chrono::Utc::now();
    Ok(Json(serde_json::json!({
        "summary": visibility_summary(&state, now),
        "cybersafety": state.effective_cybersafety(now),
        "policy": state,
    }))
    .into_response())
}

async fn propose(State(iwp): S, headers: HeaderMap, Json(change): Json<OptionChange>) -> Result<Response, ApiError> {
    let who = caller(&iwp, &headers)?;
    if who.role != Role::Custodian {
        return Err(forbidden("only custodians propose options"));
    }
    let record = blocking(move || iwp.propose(&who.member_id, change)).await??;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

#[derive(Deserialize)]
struct DecideRequest {
    record_id: String,
    approve: bool,
}

async fn decide(State(iwp): S, headers: HeaderMap, Json(req): Json<DecideRequest>) -> Result<Response, ApiError> {
    let who = caller(&iwp, &headers)?;
    if who.role != Role::Child {
        return Err(forbidden("only the child decides on consent"));
    }
    let state = blocking(move || iwp.decide(&who.member_id, &req.record_id, req.approve)).await??;
    Ok(Json(state).into_response())
}

#[derive(Deserialize)]
struct SubmitRequest {
    event: TrafficEvent,
    /// Base64 image bytes for image events.
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    hold_ms: Option<u64>,
}

#[derive(Serialize)]
struct SubmitResponse {
    exec_ids: Vec<String>,
    decision: cfas_core::dal::InterceptDecision,
    complete: bool,
}

async fn submit(State(iwp): S, headers: HeaderMap, Json(req): Json<SubmitRequest>) -> Result<Response, ApiError> {
    let who = caller(&iwp, &headers)?;
    if who.role != Role::Child || req.event.member_id != who.member_id {
        return Err(forbidden("events are submitted for the paired child only"));
    }
    let image = match req.image {
        Some(b) => Some(
            base64::engine::general_purpose::STANDARD
                .decode(b)
                .map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?,
        ),
        None => None,
    };
    let hold = req.hold_ms.map(std::time::Duration::from_millis);
    let analysis = blocking(move || iwp.analyze(req.event, image.as_deref(), hold)).await??;
    Ok(Json(SubmitResponse {
        exec_ids: analysis.jobs.iter().map(|j| j.exec_id.0.clone()).collect(),
        decision: analysis.decision,
        complete: analysis.complete,
    })
    .into_response())
}

async fn job(State(iwp): S, headers: HeaderMap, Path(exec_id): Path<String>) -> Result<Response, ApiError> {
    let who = caller(&iwp, &headers)?;
    if who.role != Role::Custodian {
        return Err(forbidden("job status is for custodians"));
    }
    let view = blocking(move || iwp.dal().fetch_results(&cfas_core::dal::ExecId(exec_id))).await?;
    let view = view.map_err(|e| ApiError(StatusCode::NOT_FOUND, e.to_string()))?;
    Ok(Json(serde_json::json!({
        "exec_id": view.job.exec_id,
        "mechanism": view.job.mechanism,
        "state": view.job.state,
        "detector_version": view.job.detector_version,
        "triggered": view.decision.as_ref().map(|d| d.triggered),
    }))
    .into_response())
}

/// Recently streamed messages per member. Lines already handed to a
/// stream that then drops are lost in transit; a client reconnecting with
/// `?since=<last seq seen>` gets them again.
#[derive(Default)]
pub struct ReplayLog {
    recent: Mutex<HashMap<String, VecDeque<PushMessage>>>,
}

impl ReplayLog {
    fn record(&self, member_id: &str, msg: &PushMessage) {
        let mut recent = self.recent.lock();
        let log = recent.entry(member_id.to_string()).or_default();
        log.push_back(msg.clone());
        if log.len() > REPLAY_DEPTH {
            log.pop_front();
        }
    }

    fn since(&self, member_id: &str, seq: u64) -> Vec<PushMessage> {
        self.recent
            .lock()
            .get(member_id)
            .map(|log| log.iter().filter(|m| m.seq > seq).cloned().collect())
            .unwrap_or_default()
    }
}

/// Forwards hub deliveries into an HTTP stream; a dropped stream reports
/// closed so the hub keeps queueing until the member reconnects.
struct StreamChannel {
    member_id: String,
    tx: mpsc::Sender<PushMessage>,
    replay: Arc<ReplayLog>,
}

impl PushChannel for StreamChannel {
    fn deliver(&self, msg: &PushMessage) -> Result<(), ChannelClosed> {
        self.tx.try_send(msg.clone()).map_err(|_| ChannelClosed)?;
        self.replay.record(&self.member_id, msg);
        Ok(())
    }
}

#[derive(Deserialize)]
struct StreamQuery {
    since: Option<u64>,
    /// Optional; must name the caller when given.
    member: Option<String>,
}

async fn stream(
    State(iwp): S,
    Extension(replay): Extension<Arc<ReplayLog>>,
    Query(q): Query<StreamQuery>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let who = caller(&iwp, &headers)?;
    if q.member.as_ref().is_some_and(|m| *m != who.member_id) {
        return Err(forbidden("a stream carries only the caller's own messages"));
    }
    let (tx, rx) = mpsc::channel(STREAM_BUFFER);
    if let Some(seq) = q.since {
        for msg in replay.since(&who.member_id, seq) {
            // Fresh channel with room for the replay window.
            let _ = tx.try_send(msg);
        }
    }
    iwp.register_channel(
        &who.member_id,
        Arc::new(StreamChannel {
            member_id: who.member_id.clone(),
            tx,
            replay,
        }),
    );
    let lines = ReceiverStream::new(rx).map(|msg| {
        let mut line = serde_json::to_vec(&msg).expect("push message serializes");
        line.push(b'\n');
        Ok::<_, std::convert::Infallible>(Bytes::from(line))
    });
    Ok((
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        Body::from_stream(lines),
    )
        .into_response())
}

async fn flag(State(iwp): S, headers: HeaderMap, Json(report): Json<FlagReport>) -> Result<Response, ApiError> {
    let who = caller(&iwp, &headers)?;
    if report.member_id != who.member_id {
        return Err(forbidden("flags are filed in the caller's own name"));
    }
    let stored = blocking(move || iwp.flag(report)).await??;
    Ok((StatusCode::CREATED, Json(stored)).into_response())
}

#[derive(Deserialize)]
struct DismissRequest {
    exec_id: String,
}

async fn dismiss(State(iwp): S, headers: HeaderMap, Json(req): Json<DismissRequest>) -> Result<Response, ApiError> {
    let who = caller(&iwp, &headers)?;
    if who.role != Role::Child {
        return Err(forbidden("only the child dismisses warnings"));
    }
    iwp.child_dismissed(&req.exec_id);
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn evidence(State(iwp): S, headers: HeaderMap, Path(exec_id): Path<String>) -> Result<Response, ApiError> {
    let who = caller(&iwp, &headers)?;
    let view = blocking(move || iwp.evidence(&who.member_id, &exec_id)).await??;
    Ok(Json(view).into_response())
}

async fn heartbeat(State(iwp): S, headers: HeaderMap) -> Result<Response, ApiError> {
    let who = caller(&iwp, &headers)?;
    if who.role != Role::Child {
        return Err(forbidden("heartbeats come from the child's add-on"));
    }
    iwp.heartbeat(chrono::Utc::now());
    Ok(Json(serde_json::json!({ "status": iwp.liveness() })).into_response())
}

pub fn router(iwp: Arc<Iwp>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/policy", get(policy))
        .route("/policy/propose", post(propose))
        .route("/policy/decide", post(decide))
        .route("/dal/submit", post(submit))
        .route("/dal/jobs/{exec_id}", get(job))
        .route("/notify/stream", get(stream))
        .route("/notify/flag", post(flag))
        .route("/notify/dismiss", post(dismiss))
        .route("/evidence/{exec_id}", get(evidence))
        .route("/addon/heartbeat", post(heartbeat))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .layer(Extension(Arc::new(ReplayLog::default())))
        .with_state(iwp)
}
