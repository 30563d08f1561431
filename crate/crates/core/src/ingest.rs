//! Telemetry ingestion: the wire batch format, the session store, trace
//! export and byte-exact overhead accounting for WebSocket and HTTP transport.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{ClassifierBank, DetectError, LiveSession, Verdict};
use crate::trace::{serialize_trace_file, EventRecord, Trace, TraceError, WireEvent};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed batch: {0}")]
    Malformed(String),
    #[error("duplicate batch {seq} for session {sid}")]
    DuplicateSeq { sid: String, seq: u64 },
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// One transport message: a run of events from a single session.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireBatch {
    pub sid: String,
    /// Per-session counter starting at 0.
    pub seq: u64,
    pub ev: Vec<WireEvent>,
}

impl WireBatch {
    pub fn parse(text: &str) -> Result<Self, IngestError> {
        let batch: WireBatch = serde_json::from_str(text).map_err(|e| IngestError::Malformed(e.to_string()))?;
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.sid.is_empty() {
            return Err(IngestError::Malformed("empty sid".into()));
        }
        if self.ev.is_empty() {
            return Err(IngestError::Malformed("empty event list".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("batch serializes")
    }

    pub fn records(&self) -> Result<Vec<EventRecord>, IngestError> {
        self.ev
            .iter()
            .map(|e| e.clone().into_record(&self.sid).map_err(IngestError::Malformed))
            .collect()
    }
}

/// Producer-side flush rule: a batch is sent once it holds `max_events` or
/// once `flush_ms` have passed since its first event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPolicy {
    pub max_events: usize,
    pub flush_ms: u64,
}

impl Default for BatchPolicy {
    fn default() -> Self {
        Self {
            max_events: 32,
            flush_ms: 150,
        }
    }
}

/// Splits a trace into the batches a collector would have sent.
pub fn batch_trace(trace: &Trace, policy: BatchPolicy) -> Vec<WireBatch> {
    let max = policy.max_events.max(1);
    let mut out: Vec<WireBatch> = Vec::new();
    let mut current: Vec<WireEvent> = Vec::new();
    let mut opened = 0;
    for r in trace.records() {
        if !current.is_empty() && r.timestamp >= opened + policy.flush_ms {
            out.push(WireBatch {
                sid: trace.session_id().to_string(),
                seq: out.len() as u64,
                ev: std::mem::take(&mut current),
            });
        }
        if current.is_empty() {
            opened = r.timestamp;
        }
        current.push(WireEvent::from_record(r));
        if current.len() == max {
            out.push(WireBatch {
                sid: trace.session_id().to_string(),
                seq: out.len() as u64,
                ev: std::mem::take(&mut current),
            });
        }
    }
    if !current.is_empty() {
        out.push(WireBatch {
            sid: trace.session_id().to_string(),
            seq: out.len() as u64,
            ev: current,
        });
    }
    out
}

/// Bookkeeping for one session.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionMeta {
    /// Wall-clock ms at the first and latest accepted batch.
    pub first_seen: u64,
    pub last_seen: u64,
    pub batches: usize,
    pub events: usize,
}

#[derive(Debug)]
struct Session {
    meta: SessionMeta,
    batches: BTreeMap<u64, Vec<EventRecord>>,
    /// Next seq the live detector is waiting for.
    next_live: u64,
    live: Option<LiveSession>,
}

/// Detection hook applied to every session.
#[derive(Debug)]
pub struct LiveDetection {
    pub bank: ClassifierBank,
    pub gamma: f64,
}

/// Thread-safe store of ingested sessions. Writers to one session are
/// serialized; different sessions proceed independently.
#[derive(Debug, Default)]
pub struct SessionStore {
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    order: Mutex<Vec<String>>,
    detection: Option<LiveDetection>,
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl SessionStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_detection(bank: ClassifierBank, gamma: f64) -> Result<Self, IngestError> {
        LiveSession::new(&bank, gamma)?;
        Ok(Self {
            detection: Some(LiveDetection { bank, gamma }),
            ..Self::default()
        })
    }

    pub fn detection(&self) -> Option<&LiveDetection> {
        self.detection.as_ref()
    }

    fn session(&self, sid: &str) -> Result<Arc<Mutex<Session>>, IngestError> {
        if let Some(s) = self.sessions.read().expect("store lock").get(sid) {
            return Ok(s.clone());
        }
        let mut map = self.sessions.write().expect("store lock");
        if let Some(s) = map.get(sid) {
            return Ok(s.clone());
        }
        let live = match &self.detection {
            Some(d) => Some(LiveSession::new(&d.bank, d.gamma)?),
            None => None,
        };
        let s = Arc::new(Mutex::new(Session {
            meta: SessionMeta::default(),
            batches: BTreeMap::new(),
            next_live: 0,
            live,
        }));
        map.insert(sid.to_string(), s.clone());
        self.order.lock().expect("order lock").push(sid.to_string());
        Ok(s)
    }

    /// Accepts a batch unless its (sid, seq) was seen before. Returns the
    /// number of events stored.
    pub fn ingest(&self, batch: WireBatch) -> Result<usize, IngestError> {
        batch.validate()?;
        let records = batch.records()?;
        let session = self.session(&batch.sid)?;
        let mut s = session.lock().expect("session lock");
        if s.batches.contains_key(&batch.seq) {
            return Err(IngestError::DuplicateSeq {
                sid: batch.sid,
                seq: batch.seq,
            });
        }
        let now = now_ms();
        if s.meta.batches == 0 {
            s.meta.first_seen = now;
        }
        s.meta.last_seen = now;
        s.meta.batches += 1;
        s.meta.events += records.len();
        let n = records.len();
        s.batches.insert(batch.seq, records);
        if let Some(d) = &self.detection {
            let s = &mut *s;
            while let Some(ready) = s.batches.get(&s.next_live) {
                let live = s.live.as_mut().expect("live session exists with detection");
                for r in ready {
                    live.push(&d.bank, r)?;
                }
                s.next_live += 1;
            }
        }
        Ok(n)
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.order.lock().expect("order lock").clone()
    }

    pub fn meta(&self, sid: &str) -> Option<SessionMeta> {
        let s = self.sessions.read().expect("store lock").get(sid)?.clone();
        let meta = s.lock().expect("session lock").meta.clone();
        Some(meta)
    }

    /// Events of one session in (seq, in-batch) order.
    pub fn events(&self, sid: &str) -> Option<Vec<EventRecord>> {
        let s = self.sessions.read().expect("store lock").get(sid)?.clone();
        let s = s.lock().expect("session lock");
        Some(s.batches.values().flatten().cloned().collect())
    }

    pub fn trace(&self, sid: &str) -> Result<Trace, IngestError> {
        let events = self
            .events(sid)
            .ok_or_else(|| IngestError::UnknownSession(sid.to_string()))?;
        Ok(Trace::new(sid, events)?)
    }

    /// Live verdict for a session; `None` without a bank or before any symbol.
    pub fn verdict(&self, sid: &str) -> Result<Option<Verdict>, IngestError> {
        let Some(d) = &self.detection else {
            return Ok(None);
        };
        let s = self
            .sessions
            .read()
            .expect("store lock")
            .get(sid)
            .cloned()
            .ok_or_else(|| IngestError::UnknownSession(sid.to_string()))?;
        let s = s.lock().expect("session lock");
        let live = s.live.as_ref().expect("live session exists with detection");
        if live.state().symbols_seen() == 0 {
            return Ok(None);
        }
        Ok(Some(live.verdict(&d.bank)?))
    }

    /// Every session as a trace, in first-seen order.
    pub fn traces(&self) -> Result<Vec<Trace>, IngestError> {
        self.session_ids().iter().map(|sid| self.trace(sid)).collect()
    }
}

/// Writes all sessions in the trace file format; returns bytes written.
pub fn export_sessions<W: Write>(store: &SessionStore, out: W) -> Result<usize, IngestError> {
    Ok(serialize_trace_file(&store.traces()?, out)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    Websocket,
    Http,
}

/// Bytes of one WebSocket frame header carrying `payload` bytes.
pub fn ws_frame_overhead(payload: usize, masked: bool) -> usize {
    let extended = match payload {
        0..=125 => 0,
        126..=65_535 => 2,
        _ => 8,
    };
    2 + extended + if masked { 4 } else { 0 }
}

/// Header block sizes charged to every HTTP request/response pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderProfile {
    pub request: usize,
    pub response: usize,
}

impl HeaderProfile {
    /// Average header sizes measured for the HTTP collector in the original deployment.
    pub const MEASURED: HeaderProfile = HeaderProfile {
        request: 770,
        response: 330,
    };
}

/// Raw byte counts observed for one message.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageBytes {
    pub payload: usize,
    /// Size of the same batch in the compact binary encoding.
    pub binary_payload: usize,
    pub request_headers: usize,
    pub response_headers: usize,
    /// Client-to-server WebSocket frames carry a 4-byte mask.
    pub masked: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub mode: Option<TransportMode>,
    pub messages: usize,
    pub payload_bytes: usize,
    pub binary_payload_bytes: usize,
    pub framing_bytes: usize,
    pub header_bytes: usize,
}

impl OverheadReport {
    /// Bytes spent on every message beyond its payload.
    pub fn recurrent_overhead(&self) -> usize {
        self.framing_bytes + self.header_bytes
    }

    pub fn total_bytes(&self) -> usize {
        self.payload_bytes + self.recurrent_overhead()
    }

    pub fn framing_per_message(&self) -> f64 {
        self.framing_bytes as f64 / self.messages.max(1) as f64
    }

    /// Fraction of `other`'s recurrent overhead saved by this transport.
    pub fn reduction_versus(&self, other: &OverheadReport) -> f64 {
        1.0 - self.recurrent_overhead() as f64 / other.recurrent_overhead() as f64
    }
}

pub fn measure_overhead(transcript: &[MessageBytes], mode: TransportMode) -> OverheadReport {
    let mut report = OverheadReport {
        mode: Some(mode),
        ..OverheadReport::default()
    };
    for m in transcript {
        report.messages += 1;
        report.payload_bytes += m.payload;
        report.binary_payload_bytes += m.binary_payload;
        match mode {
            TransportMode::Websocket => report.framing_bytes += ws_frame_overhead(m.payload, m.masked),
            TransportMode::Http => report.header_bytes += m.request_headers + m.response_headers,
        }
    }
    report
}

/// The transcript a replay of `batches` produces in `mode`.
pub fn transcript(batches: &[WireBatch], mode: TransportMode, headers: HeaderProfile) -> Vec<MessageBytes> {
    batches
        .iter()
        .map(|b| {
            let (request_headers, response_headers) = match mode {
                TransportMode::Websocket => (0, 0),
                TransportMode::Http => (headers.request, headers.response),
            };
            MessageBytes {
                payload: b.to_json().len(),
                binary_payload: encode_binary(b).len(),
                request_headers,
                response_headers,
                masked: mode == TransportMode::Websocket,
            }
        })
        .collect()
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

fn put_signed(out: &mut Vec<u8>, v: i64) {
    put_varint(out, ((v << 1) ^ (v >> 63)) as u64);
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_varint(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

/// Compact binary form of a batch: varint seq and count, then per event a
/// flag byte, the event index, the timestamp delta and zigzag coordinates.
pub fn encode_binary(batch: &WireBatch) -> Vec<u8> {
    let mut out = Vec::new();
    put_str(&mut out, &batch.sid);
    put_varint(&mut out, batch.seq);
    put_varint(&mut out, batch.ev.len() as u64);
    let mut last = 0u64;
    for (k, e) in batch.ev.iter().enumerate() {
        let flags = u8::from(e.x.is_some()) | u8::from(e.p.is_some()) << 1 | u8::from(e.d.is_some()) << 2;
        out.push(flags);
        out.push(e.i as u8);
        if k == 0 {
            put_varint(&mut out, e.t);
        } else {
            put_signed(&mut out, e.t as i64 - last as i64);
        }
        last = e.t;
        if let (Some(x), Some(y)) = (e.x, e.y) {
            put_signed(&mut out, x);
            put_signed(&mut out, y);
        }
        if let Some(p) = &e.p {
            put_str(&mut out, p);
        }
        if let Some(d) = &e.d {
            put_str(&mut out, d);
        }
    }
    out
}
