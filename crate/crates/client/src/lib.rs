//! Client for the ingestion service: replays traces as wire batches over
//! WebSocket or HTTP and queries sessions and verdicts.

use std::time::{Duration, Instant};

use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio_tungstenite::tungstenite::{self, Message};
use webguard_core::detect::Verdict;
use webguard_core::ingest::{
    batch_trace, measure_overhead, transcript, BatchPolicy, HeaderProfile, MessageBytes, OverheadReport, SessionMeta,
    TransportMode,
};
use webguard_core::trace::{parse_trace_file, Trace, TraceError};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("websocket: {0}")]
    WebSocket(#[from] tungstenite::Error),
    #[error("server answered {status}: {body}")]
    Status { status: u16, body: String },
    #[error("server rejected {0} batch(es): {1}")]
    Rejected(usize, String),
    #[error("invalid base url `{0}`")]
    BadUrl(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayOptions {
    pub transport: TransportMode,
    pub policy: BatchPolicy,
    /// Wall seconds per trace second; 0 sends as fast as possible.
    pub time_scale: f64,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            transport: TransportMode::Websocket,
            policy: BatchPolicy::default(),
            time_scale: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub session_id: String,
    pub transport: TransportMode,
    pub batches: usize,
    pub events: usize,
    pub wall_ms: u64,
    /// Expected byte counts, with HTTP headers charged at the measured profile.
    pub overhead: OverheadReport,
    pub transcript: Vec<MessageBytes>,
}

/// One entry of the session listing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub sid: String,
    #[serde(flatten)]
    pub meta: SessionMeta,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverheadSummary {
    pub websocket: OverheadReport,
    pub http: OverheadReport,
}

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str) -> Result<Self, ClientError> {
        let base = base.trim_end_matches('/');
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(ClientError::BadUrl(base.to_string()));
        }
        Ok(Self {
            base: base.to_string(),
            http: reqwest::Client::new(),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn ws_url(&self) -> String {
        let rest = self.base.strip_prefix("http").unwrap_or(&self.base);
        format!("ws{rest}/ws")
    }

    async fn get(&self, path: &str) -> Result<Option<String>, ClientError> {
        let resp = self.http.get(self.url(path)).send().await?;
        let status = resp.status().as_u16();
        let body = resp.text().await?;
        match status {
            200 => Ok(Some(body)),
            404 => Ok(None),
            _ => Err(ClientError::Status { status, body }),
        }
    }

    async fn get_json<T: for<'de> Deserialize<'de>>(&self, path: &str) -> Result<Option<T>, ClientError> {
        match self.get(path).await? {
            Some(body) => serde_json::from_str(&body).map(Some).map_err(|e| ClientError::Status {
                status: 200,
                body: e.to_string(),
            }),
            None => Ok(None),
        }
    }

    /// Sends `trace` as batches and waits until the service has them all.
    pub async fn replay(&self, trace: &Trace, opts: &ReplayOptions) -> Result<ReplayReport, ClientError> {
        let batches = batch_trace(trace, opts.policy);
        let started = Instant::now();
        let t0 = trace.start_time();
        let pace = |first_t: u64| {
            let due = Duration::from_secs_f64((first_t - t0) as f64 / 1000.0 * opts.time_scale);
            tokio::time::sleep_until((started + due).into())
        };
        match opts.transport {
            TransportMode::Websocket => {
                let (mut ws, _) = tokio_tungstenite::connect_async(self.ws_url()).await?;
                for b in &batches {
                    if opts.time_scale > 0.0 {
                        pace(b.ev[0].t).await;
                    }
                    ws.send(Message::text(b.to_json())).await?;
                }
                ws.close(None).await?;
                let mut errors = Vec::new();
                while let Some(msg) = ws.next().await {
                    match msg? {
                        Message::Text(t) => errors.push(t.to_string()),
                        Message::Close(_) => break,
                        _ => {}
                    }
                }
                if !errors.is_empty() {
                    return Err(ClientError::Rejected(errors.len(), errors.join("; ")));
                }
            }
            TransportMode::Http => {
                for b in &batches {
                    if opts.time_scale > 0.0 {
                        pace(b.ev[0].t).await;
                    }
                    let resp = self
                        .http
                        .post(self.url("/collect"))
                        .header("content-type", "application/json")
                        .body(b.to_json())
                        .send()
                        .await?;
                    let status = resp.status().as_u16();
                    if status != 200 {
                        return Err(ClientError::Status {
                            status,
                            body: resp.text().await?,
                        });
                    }
                }
            }
        }
        let tx = transcript(&batches, opts.transport, HeaderProfile::MEASURED);
        Ok(ReplayReport {
            session_id: trace.session_id().to_string(),
            transport: opts.transport,
            batches: batches.len(),
            events: trace.len(),
            wall_ms: started.elapsed().as_millis() as u64,
            overhead: measure_overhead(&tx, opts.transport),
            transcript: tx,
        })
    }

    /// The session's verdict, or `None` when there is none yet.
    pub async fn verdict(&self, sid: &str) -> Result<Option<Verdict>, ClientError> {
        self.get_json(&format!("/sessions/{sid}/verdict")).await
    }

    pub async fn sessions(&self) -> Result<Vec<SessionInfo>, ClientError> {
        Ok(self.get_json("/sessions").await?.unwrap_or_default())
    }

    pub async fn trace(&self, sid: &str) -> Result<Option<Trace>, ClientError> {
        match self.get(&format!("/sessions/{sid}/trace")).await? {
            Some(body) => Ok(parse_trace_file(body.as_bytes())?.into_iter().next()),
            None => Ok(None),
        }
    }

    pub async fn export(&self) -> Result<Vec<Trace>, ClientError> {
        match self.get("/export").await? {
            Some(body) if !body.is_empty() => Ok(parse_trace_file(body.as_bytes())?),
            _ => Ok(Vec::new()),
        }
    }

    /// Byte counts the service observed on each transport.
    pub async fn overhead(&self) -> Result<OverheadSummary, ClientError> {
        self.get_json("/overhead").await?.ok_or(ClientError::Status {
            status: 404,
            body: "overhead".into(),
        })
    }
}
