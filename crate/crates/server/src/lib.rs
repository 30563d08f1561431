//! Ingestion service: WebSocket (`/ws`) and HTTP (`/collect`) endpoints over a
//! shared [`SessionStore`], with live verdicts when a detection bank is loaded.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::{HeaderMap, Method, StatusCode, Uri, Version};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{watch, Notify};
use tokio::task::JoinHandle;
use webguard_core::ingest::{
    export_sessions, measure_overhead, IngestError, MessageBytes, OverheadReport, SessionMeta, SessionStore,
    TransportMode, WireBatch,
};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw sizes of every message the service received, per transport.
#[derive(Debug, Default)]
pub struct ByteTap {
    websocket: Mutex<Vec<MessageBytes>>,
    http: Mutex<Vec<MessageBytes>>,
}

impl ByteTap {
    pub fn transcript(&self, mode: TransportMode) -> Vec<MessageBytes> {
        match mode {
            TransportMode::Websocket => self.websocket.lock().expect("tap lock").clone(),
            TransportMode::Http => self.http.lock().expect("tap lock").clone(),
        }
    }

    pub fn report(&self, mode: TransportMode) -> OverheadReport {
        measure_overhead(&self.transcript(mode), mode)
    }
}

#[derive(Debug, Serialize)]
pub struct OverheadSummary {
    pub websocket: OverheadReport,
    /// Request header bytes here are the received header blocks; response
    /// headers are not observed server-side.
    pub http: OverheadReport,
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
    pub tap: Arc<ByteTap>,
    shutdown: watch::Receiver<bool>,
    sockets: Arc<SocketCount>,
}

#[derive(Debug, Default)]
struct SocketCount {
    open: AtomicUsize,
    closed: Notify,
}

struct SocketGuard(Arc<SocketCount>);

impl SocketGuard {
    fn new(count: Arc<SocketCount>) -> Self {
        count.open.fetch_add(1, Ordering::SeqCst);
        Self(count)
    }
}

impl Drop for SocketGuard {
    fn drop(&mut self) {
        self.0.open.fetch_sub(1, Ordering::SeqCst);
        self.0.closed.notify_waiters();
    }
}

fn error_body(e: &IngestError) -> serde_json::Value {
    match e {
        IngestError::DuplicateSeq { .. } => json!({"ok": false, "error": e.to_string(), "replay": true}),
        _ => json!({"ok": false, "error": e.to_string()}),
    }
}

fn error_status(e: &IngestError) -> StatusCode {
    match e {
        IngestError::DuplicateSeq { .. } => StatusCode::CONFLICT,
        IngestError::UnknownSession(_) => StatusCode::NOT_FOUND,
        IngestError::Malformed(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

fn ingest_text(store: &SessionStore, text: &str) -> Result<usize, IngestError> {
    store.ingest(WireBatch::parse(text)?)
}

/// Size of the request line plus header block as it appears on the wire.
fn request_header_bytes(method: &Method, uri: &Uri, version: Version, headers: &HeaderMap) -> usize {
    let line = format!("{method} {uri} {version:?}\r\n").len();
    line + headers
        .iter()
        .map(|(k, v)| k.as_str().len() + 2 + v.len() + 2)
        .sum::<usize>()
        + 2
}

async fn collect(
    State(state): State<AppState>,
    method: Method,
    uri: Uri,
    version: Version,
    headers: HeaderMap,
    body: String,
) -> Response {
    state.tap.http.lock().expect("tap lock").push(MessageBytes {
        payload: body.len(),
        request_headers: request_header_bytes(&method, &uri, version, &headers),
        ..MessageBytes::default()
    });
    match ingest_text(&state.store, &body) {
        Ok(_) => Json(json!({"ok": true})).into_response(),
        Err(e) => {
            tracing::warn!(error = %e, "rejected batch");
            (error_status(&e), Json(error_body(&e))).into_response()
        }
    }
}

async fn ws_upgrade(State(state): State<AppState>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| handle_socket(socket, state))
}

async fn handle_socket(mut socket: WebSocket, mut state: AppState) {
    let _guard = SocketGuard::new(state.sockets.clone());
    loop {
        let msg = tokio::select! {
            msg = socket.recv() => msg,
            _ = state.shutdown.changed() => {
                let _ = socket.send(Message::Close(None)).await;
                break;
            }
        };
        let Some(Ok(msg)) = msg else { break };
        let reply = match msg {
            Message::Text(text) => {
                state.tap.websocket.lock().expect("tap lock").push(MessageBytes {
                    payload: text.len(),
                    masked: true,
                    ..MessageBytes::default()
                });
                match ingest_text(&state.store, text.as_str()) {
                    Ok(_) => None,
                    Err(e) => {
                        tracing::warn!(error = %e, "rejected batch");
                        Some(error_body(&e))
                    }
                }
            }
            Message::Binary(_) => Some(json!({"ok": false, "error": "binary frames are not accepted"})),
            // Keep polling so the close reply gets flushed.
            Message::Close(_) => continue,
            _ => None,
        };
        if let Some(body) = reply {
            if socket.send(Message::Text(body.to_string().into())).await.is_err() {
                break;
            }
        }
    }
}

async fn verdict(State(state): State<AppState>, Path(sid): Path<String>) -> Response {
    if state.store.detection().is_none() {
        return (
            StatusCode::NOT_FOUND,
            Json(json!({"ok": false, "error": "no detection bank loaded"})),
        )
            .into_response();
    }
    match state.store.verdict(&sid) {
        Ok(Some(v)) => Json(v).into_response(),
        Ok(None) => (
            StatusCode::NOT_FOUND,
            Json(json!({"ok": false, "error": "no symbols yet"})),
        )
            .into_response(),
        Err(e) => (error_status(&e), Json(error_body(&e))).into_response(),
    }
}

#[derive(Serialize)]
struct SessionEntry {
    sid: String,
    #[serde(flatten)]
    meta: SessionMeta,
}

async fn sessions(State(state): State<AppState>) -> Json<Vec<SessionEntry>> {
    let entries = state
        .store
        .session_ids()
        .into_iter()
        .filter_map(|sid| state.store.meta(&sid).map(|meta| SessionEntry { sid, meta }))
        .collect();
    Json(entries)
}

fn jsonl(result: Result<Vec<u8>, IngestError>) -> Response {
    match result {
        Ok(bytes) => ([("content-type", "application/x-ndjson")], bytes).into_response(),
        Err(e) => (error_status(&e), Json(error_body(&e))).into_response(),
    }
}

async fn session_trace(State(state): State<AppState>, Path(sid): Path<String>) -> Response {
    jsonl(state.store.trace(&sid).and_then(|t| {
        let mut out = Vec::new();
        webguard_core::trace::serialize_trace_file(&[t], &mut out)?;
        Ok(out)
    }))
}

async fn export(State(state): State<AppState>) -> Response {
    jsonl({
        let mut out = Vec::new();
        export_sessions(&state.store, &mut out).map(|_| out)
    })
}

async fn overhead(State(state): State<AppState>) -> Json<OverheadSummary> {
    Json(OverheadSummary {
        websocket: state.tap.report(TransportMode::Websocket),
        http: state.tap.report(TransportMode::Http),
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/collect", post(collect))
        .route("/sessions", get(sessions))
        .route("/sessions/{sid}/trace", get(session_trace))
        .route("/sessions/{sid}/verdict", get(verdict))
        .route("/export", get(export))
        .route("/overhead", get(overhead))
        .with_state(state)
}

/// A running service. Dropping the handle leaves the service running;
/// call [`ServerHandle::shutdown`] to stop it.
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub store: Arc<SessionStore>,
    pub tap: Arc<ByteTap>,
    stop: watch::Sender<bool>,
    sockets: Arc<SocketCount>,
    task: JoinHandle<Result<(), std::io::Error>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting connections, lets open sockets finish the batch in
    /// hand and waits for everything to close.
    pub async fn shutdown(self) -> Result<Arc<SessionStore>, ServerError> {
        let _ = self.stop.send(true);
        loop {
            let closed = self.sockets.closed.notified();
            if self.sockets.open.load(Ordering::SeqCst) == 0 {
                break;
            }
            closed.await;
        }
        match self.task.await {
            Ok(r) => r?,
            Err(e) => return Err(std::io::Error::other(e).into()),
        }
        Ok(self.store)
    }
}

/// Binds `addr` and serves `store` until [`ServerHandle::shutdown`].
pub async fn serve(addr: &str, store: SessionStore) -> Result<ServerHandle, ServerError> {
    let listener = TcpListener::bind(addr).await.map_err(|source| ServerError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    let local = listener.local_addr()?;
    let (stop, shutdown) = watch::channel(false);
    let state = AppState {
        store: Arc::new(store),
        tap: Arc::new(ByteTap::default()),
        shutdown: shutdown.clone(),
        sockets: Arc::new(SocketCount::default()),
    };
    let handle_state = state.clone();
    let mut signal = shutdown;
    let task = tokio::spawn(async move {
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async move {
                let _ = signal.wait_for(|v| *v).await;
            })
            .await
    });
    tracing::info!(%local, "listening");
    Ok(ServerHandle {
        addr: local,
        store: handle_state.store,
        tap: handle_state.tap,
        stop,
        sockets: handle_state.sockets,
        task,
    })
}
