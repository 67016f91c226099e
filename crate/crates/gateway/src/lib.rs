//! HTTP and WebSocket front end for live bus sessions.
//!
//! Each session owns a [`physbus_core::Platform`] driven by a paced virtual
//! clock. Clients send commands as JSON envelopes and follow an ordered,
//! resumable event stream.

mod session;
pub mod wire;

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use physbus_core::module::ModuleDescriptor;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::{broadcast, oneshot};

use session::{Request, SessionHandle};
pub use wire::{
    Ack, CommandEnvelope, DescriptorRef, EventBody, Rejection, SessionConfig, SessionEvent, SessionState, SlotState,
};

#[derive(Debug, thiserror::Error)]
pub enum PaletteError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {detail}")]
    Descriptor { path: String, detail: String },
}

/// Loads every `*.module.json` in `dir`, keyed by file stem without the
/// `.module` suffix.
pub fn load_palette(dir: &Path) -> Result<BTreeMap<String, ModuleDescriptor>, PaletteError> {
    let io_err = |source| PaletteError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(key) = name.strip_suffix(".module.json") else {
            continue;
        };
        let text = std::fs::read_to_string(&path).map_err(|source| PaletteError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let desc = ModuleDescriptor::from_json(&text).map_err(|e| PaletteError::Descriptor {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        out.insert(key.to_string(), desc);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("session {0} has stopped")]
    SessionStopped(String),
}

impl GatewayError {
    pub fn kind(&self) -> &'static str {
        match self {
            GatewayError::UnknownSession(_) => "UnknownSession",
            GatewayError::InvalidConfig(_) => "InvalidConfig",
            GatewayError::SessionStopped(_) => "SessionStopped",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            GatewayError::UnknownSession(_) => StatusCode::NOT_FOUND,
            GatewayError::InvalidConfig(_) => StatusCode::BAD_REQUEST,
            GatewayError::SessionStopped(_) => StatusCode::GONE,
        }
    }
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let body = json!({"error": self.kind(), "detail": self.to_string()});
        (self.status(), Json(body)).into_response()
    }
}

/// Shared handle over all live sessions. Cheap to clone.
#[derive(Clone)]
pub struct Gateway {
    palette: Arc<BTreeMap<String, ModuleDescriptor>>,
    sessions: Arc<Mutex<HashMap<String, SessionHandle>>>,
}

impl Gateway {
    pub fn new(palette: BTreeMap<String, ModuleDescriptor>) -> Self {
        Gateway {
            palette: Arc::new(palette),
            sessions: Arc::new(Mutex::new(HashMap::new())),
        }
    }

    pub fn palette(&self) -> &BTreeMap<String, ModuleDescriptor> {
        &self.palette
    }

    /// Starts a session. Must be called inside a tokio runtime.
    pub fn create_session(&self, config: SessionConfig) -> Result<String, GatewayError> {
        config.validate().map_err(GatewayError::InvalidConfig)?;
        let id = uuid::Uuid::new_v4().to_string();
        let handle = session::spawn(config, Arc::clone(&self.palette));
        self.sessions.lock().expect("sessions poisoned").insert(id.clone(), handle);
        tracing::info!(session = %id, "session created");
        Ok(id)
    }

    pub fn close_session(&self, id: &str) -> Result<(), GatewayError> {
        self.sessions
            .lock()
            .expect("sessions poisoned")
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| GatewayError::UnknownSession(id.to_string()))
    }

    fn with_session<T>(&self, id: &str, f: impl FnOnce(&SessionHandle) -> T) -> Result<T, GatewayError> {
        let sessions = self.sessions.lock().expect("sessions poisoned");
        sessions
            .get(id)
            .map(f)
            .ok_or_else(|| GatewayError::UnknownSession(id.to_string()))
    }

    /// Applies a command at the session's current virtual time.
    pub async fn command(&self, id: &str, env: CommandEnvelope) -> Result<Result<Ack, Rejection>, GatewayError> {
        let (tx, rx) = oneshot::channel();
        let requests = self.with_session(id, |s| s.requests.clone())?;
        let stopped = || GatewayError::SessionStopped(id.to_string());
        requests.send(Request::Command(env, tx)).await.map_err(|_| stopped())?;
        rx.await.map_err(|_| stopped())
    }

    pub async fn state(&self, id: &str) -> Result<SessionState, GatewayError> {
        let (tx, rx) = oneshot::channel();
        let requests = self.with_session(id, |s| s.requests.clone())?;
        let stopped = || GatewayError::SessionStopped(id.to_string());
        requests.send(Request::State(tx)).await.map_err(|_| stopped())?;
        rx.await.map_err(|_| stopped())
    }

    /// Events already recorded with `seq >= from_seq`.
    pub fn events_since(&self, id: &str, from_seq: u64) -> Result<Vec<SessionEvent>, GatewayError> {
        self.with_session(id, |s| s.log.since(from_seq))
    }

    /// Every event with `seq >= from_seq`, first the recorded ones and then
    /// new ones as they happen. Each seq is yielded once, in order.
    pub fn subscribe(
        &self,
        id: &str,
        from_seq: u64,
    ) -> Result<impl futures::Stream<Item = SessionEvent> + Send + 'static, GatewayError> {
        let log = self.with_session(id, |s| Arc::clone(&s.log))?;
        let (backlog, rx) = log.subscribe(from_seq);
        // weak, so closing the session ends the stream
        let log = Arc::downgrade(&log);
        let next = from_seq.max(1);
        Ok(futures::stream::unfold(
            (backlog.into_iter(), rx, next, log),
            |(mut backlog, mut rx, mut next, log)| async move {
                loop {
                    if let Some(e) = backlog.next() {
                        if e.seq < next {
                            continue;
                        }
                        next = e.seq + 1;
                        return Some((e, (backlog, rx, next, log)));
                    }
                    match rx.recv().await {
                        Ok(e) if e.seq < next => continue,
                        Ok(e) if e.seq == next => {
                            next += 1;
                            return Some((e, (backlog, rx, next, log)));
                        }
                        // a gap: refill from the log
                        Ok(_) | Err(broadcast::error::RecvError::Lagged(_)) => {
                            backlog = log.upgrade()?.since(next).into_iter();
                        }
                        Err(broadcast::error::RecvError::Closed) => return None,
                    }
                }
            },
        ))
    }
}

/// Builds the HTTP router. See `docs/wire.md` for the routes.
pub fn router(gateway: Gateway) -> Router {
    Router::new()
        .route("/descriptors", get(list_descriptors))
        .route("/session", post(create_session))
        .route("/session/{id}", get(session_state).delete(close_session))
        .route("/session/{id}/command", post(send_command))
        .route("/session/{id}/log", get(session_log))
        .route("/session/{id}/events", get(session_events))
        .with_state(gateway)
}

/// Serves the gateway on an already bound listener until the process ends.
pub async fn serve(listener: tokio::net::TcpListener, gateway: Gateway) -> io::Result<()> {
    axum::serve(listener, router(gateway)).await
}

async fn list_descriptors(State(gw): State<Gateway>) -> Json<BTreeMap<String, ModuleDescriptor>> {
    Json(gw.palette().clone())
}

async fn create_session(State(gw): State<Gateway>, body: axum::body::Bytes) -> Response {
    let config = if body.iter().all(u8::is_ascii_whitespace) {
        SessionConfig::default()
    } else {
        match serde_json::from_slice::<SessionConfig>(&body) {
            Ok(c) => c,
            Err(e) => return GatewayError::InvalidConfig(e.to_string()).into_response(),
        }
    };
    match gw.create_session(config) {
        Ok(id) => (StatusCode::CREATED, Json(json!({ "id": id }))).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn close_session(State(gw): State<Gateway>, UrlPath(id): UrlPath<String>) -> Response {
    match gw.close_session(&id) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => e.into_response(),
    }
}

async fn session_state(State(gw): State<Gateway>, UrlPath(id): UrlPath<String>) -> Response {
    match gw.state(&id).await {
        Ok(s) => Json(s).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn send_command(State(gw): State<Gateway>, UrlPath(id): UrlPath<String>, body: axum::body::Bytes) -> Response {
    let env = match serde_json::from_slice::<CommandEnvelope>(&body) {
        Ok(env) => env,
        Err(e) => {
            // still 404 for a bad session, so clients can tell the two apart
            if let Err(err) = gw.with_session(&id, |_| ()) {
                return err.into_response();
            }
            let r = Rejection::new("MalformedCommand", e.to_string());
            return (StatusCode::BAD_REQUEST, Json(r)).into_response();
        }
    };
    match gw.command(&id, env).await {
        Ok(Ok(ack)) => Json(ack).into_response(),
        Ok(Err(r)) => (StatusCode::UNPROCESSABLE_ENTITY, Json(r)).into_response(),
        Err(e) => e.into_response(),
    }
}

#[derive(Deserialize)]
struct FromSeq {
    #[serde(default)]
    from_seq: u64,
}

async fn session_log(State(gw): State<Gateway>, UrlPath(id): UrlPath<String>, Query(q): Query<FromSeq>) -> Response {
    match gw.events_since(&id, q.from_seq) {
        Ok(events) => Json(events).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn session_events(
    State(gw): State<Gateway>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<FromSeq>,
    ws: WebSocketUpgrade,
) -> Response {
    match gw.subscribe(&id, q.from_seq) {
        Ok(stream) => ws.on_upgrade(move |socket| pump(socket, stream)),
        Err(e) => e.into_response(),
    }
}

async fn pump(socket: WebSocket, events: impl futures::Stream<Item = SessionEvent> + Send + 'static) {
    let (mut tx, mut rx) = socket.split();
    let mut events = std::pin::pin!(events);
    loop {
        tokio::select! {
            e = events.next() => {
                let Some(e) = e else { break };
                let text = serde_json::to_string(&e).expect("event serializes");
                if tx.send(WsMessage::Text(text.into())).await.is_err() {
                    break;
                }
            }
            msg = rx.next() => match msg {
                None | Some(Err(_)) | Some(Ok(WsMessage::Close(_))) => break,
                Some(Ok(_)) => {}
            },
        }
    }
    let _ = tx.close().await;
}
