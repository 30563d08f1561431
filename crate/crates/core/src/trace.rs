//! Event catalog, per-session traces and the line-delimited trace file format.
//!
//! A trace file holds one JSON object per line, one event per line:
//!
//! ```text
//! {"sid":"a1","i":2,"t":1673736854980,"x":456,"y":490}
//! {"sid":"a1","i":14,"t":1673736855315,"x":482,"y":425,"d":"input#user"}
//! ```
//!
//! Optional keys (`x`, `y`, `p`, `d`) are omitted when absent, never written
//! as `null`. Labels live in a `sid,label` CSV sidecar.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of entries in the event catalog.
pub const NUM_EVENTS: usize = 43;

/// Where the listener for an event is attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventDomain {
    Document,
    Window,
}

const CATALOG: [&str; NUM_EVENTS] = [
    "mousedown",
    "mouseup",
    "mousemove",
    "mouseover",
    "mouseout",
    "mousewheel",
    "wheel",
    "touchstart",
    "touchend",
    "touchmove",
    "deviceorientation",
    "keydown",
    "keyup",
    "keypress",
    "click",
    "dblclick",
    "scroll",
    "change",
    "select",
    "submit",
    "reset",
    "contextmenu",
    "cut",
    "copy",
    "paste",
    "load",
    "unload",
    "beforeunload",
    "blur",
    "focus",
    "resize",
    "error",
    "abort",
    "online",
    "offline",
    "storage",
    "popstate",
    "hashchange",
    "pagehide",
    "pageshow",
    "message",
    "beforeprint",
    "afterprint",
];

/// Index of the first window-domain event.
const FIRST_WINDOW_EVENT: u8 = 25;

/// Frequently referenced catalog indices.
pub mod events {
    pub const MOUSEDOWN: u8 = 0;
    pub const MOUSEUP: u8 = 1;
    pub const MOUSEMOVE: u8 = 2;
    pub const WHEEL: u8 = 6;
    pub const KEYDOWN: u8 = 11;
    pub const KEYUP: u8 = 12;
    pub const KEYPRESS: u8 = 13;
    pub const CLICK: u8 = 14;
    pub const SCROLL: u8 = 16;
    pub const CHANGE: u8 = 17;
    pub const SELECT: u8 = 18;
    pub const SUBMIT: u8 = 19;
    pub const LOAD: u8 = 25;
    pub const BLUR: u8 = 28;
    pub const FOCUS: u8 = 29;
}

/// One catalog row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CatalogEntry {
    pub index: u8,
    pub name: &'static str,
    pub domain: EventDomain,
}

/// The sealed 43-entry table of monitored browser events.
#[derive(Clone, Copy, Debug, Default)]
pub struct EventCatalog;

impl EventCatalog {
    pub fn entries() -> impl ExactSizeIterator<Item = CatalogEntry> {
        CATALOG.iter().enumerate().map(|(i, name)| {
            let index = i as u8;
            CatalogEntry {
                index,
                name,
                domain: domain_of(index),
            }
        })
    }

    pub fn name(index: u8) -> Option<&'static str> {
        CATALOG.get(index as usize).copied()
    }

    pub fn domain(index: u8) -> Option<EventDomain> {
        ((index as usize) < NUM_EVENTS).then(|| domain_of(index))
    }

    pub fn is_valid(index: u8) -> bool {
        (index as usize) < NUM_EVENTS
    }
}

fn domain_of(index: u8) -> EventDomain {
    if index < FIRST_WINDOW_EVENT {
        EventDomain::Document
    } else {
        EventDomain::Window
    }
}

/// Resolves an event name to its catalog index.
///
/// Accepts `"context menu"` as an alias of `contextmenu`.
pub fn catalog_lookup(name: &str) -> Result<u8, TraceError> {
    let normalized = if name == "context menu" { "contextmenu" } else { name };
    CATALOG
        .iter()
        .position(|n| *n == normalized)
        .map(|i| i as u8)
        .ok_or_else(|| TraceError::UnknownEvent(name.to_string()))
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("unknown event name `{0}`")]
    UnknownEvent(String),
    #[error("event index {0} is outside the catalog")]
    InvalidEventIndex(u32),
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("input contains no records")]
    EmptyInput,
    #[error("trace has no records")]
    EmptyTrace,
    #[error("record for session `{found}` in trace `{expected}`")]
    SessionMismatch { expected: String, found: String },
    #[error("invalid agent label `{0}`")]
    InvalidLabel(String),
    #[error("label sidecar: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A single timestamped browser event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventRecord {
    pub session_id: String,
    pub event_index: u8,
    /// Client epoch milliseconds.
    pub timestamp: u64,
    /// Screen position in pixels; x and y are always present together.
    pub position: Option<(i64, i64)>,
    pub url_path: Option<String>,
    pub dom_target: Option<String>,
}

impl EventRecord {
    pub fn new(session_id: impl Into<String>, event_index: u8, timestamp: u64) -> Self {
        Self {
            session_id: session_id.into(),
            event_index,
            timestamp,
            position: None,
            url_path: None,
            dom_target: None,
        }
    }

    pub fn at(mut self, x: i64, y: i64) -> Self {
        self.position = Some((x, y));
        self
    }

    pub fn with_target(mut self, target: impl Into<String>) -> Self {
        self.dom_target = Some(target.into());
        self
    }

    pub fn with_path(mut self, path: impl Into<String>) -> Self {
        self.url_path = Some(path.into());
        self
    }
}

/// Who produced a session.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AgentLabel {
    Human,
    UiFuzzer,
    Crawler,
    Scanner,
    RandomNaive,
    RandomDelayed,
    Unknown,
    Synthetic(String),
}

impl fmt::Display for AgentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentLabel::Human => f.write_str("human"),
            AgentLabel::UiFuzzer => f.write_str("ui_fuzzer"),
            AgentLabel::Crawler => f.write_str("crawler"),
            AgentLabel::Scanner => f.write_str("scanner"),
            AgentLabel::RandomNaive => f.write_str("random_naive"),
            AgentLabel::RandomDelayed => f.write_str("random_delayed"),
            AgentLabel::Unknown => f.write_str("unknown"),
            AgentLabel::Synthetic(tag) => write!(f, "synthetic:{tag}"),
        }
    }
}

impl FromStr for AgentLabel {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "human" => AgentLabel::Human,
            "ui_fuzzer" => AgentLabel::UiFuzzer,
            "crawler" => AgentLabel::Crawler,
            "scanner" => AgentLabel::Scanner,
            "random_naive" => AgentLabel::RandomNaive,
            "random_delayed" => AgentLabel::RandomDelayed,
            "unknown" => AgentLabel::Unknown,
            other => match other.strip_prefix("synthetic:") {
                Some(tag) if !tag.is_empty() => AgentLabel::Synthetic(tag.to_string()),
                _ => return Err(TraceError::InvalidLabel(other.to_string())),
            },
        })
    }
}

impl Serialize for AgentLabel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AgentLabel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The ordered events of one session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    session_id: String,
    records: Vec<EventRecord>,
    pub label: Option<AgentLabel>,
}

impl Trace {
    /// Builds a trace, stably sorting records by timestamp.
    pub fn new(session_id: impl Into<String>, mut records: Vec<EventRecord>) -> Result<Self, TraceError> {
        let session_id = session_id.into();
        if records.is_empty() {
            return Err(TraceError::EmptyTrace);
        }
        for r in &records {
            if r.session_id != session_id {
                return Err(TraceError::SessionMismatch {
                    expected: session_id,
                    found: r.session_id.clone(),
                });
            }
            if !EventCatalog::is_valid(r.event_index) {
                return Err(TraceError::InvalidEventIndex(r.event_index as u32));
            }
        }
        records.sort_by_key(|r| r.timestamp);
        Ok(Self {
            session_id,
            records,
            label: None,
        })
    }

    pub fn with_label(mut self, label: AgentLabel) -> Self {
        self.label = Some(label);
        self
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn start_time(&self) -> u64 {
        self.records[0].timestamp
    }

    pub fn duration_ms(&self) -> u64 {
        self.records[self.records.len() - 1].timestamp - self.start_time()
    }

    /// Keeps only the records accepted by `keep`; `None` if nothing survives.
    pub fn filter(&self, keep: impl Fn(&EventRecord) -> bool) -> Option<Trace> {
        let records: Vec<_> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        if records.is_empty() {
            return None;
        }
        Some(Trace {
            session_id: self.session_id.clone(),
            records,
            label: self.label.clone(),
        })
    }
}

/// One event as it appears on the wire: the trace-file schema without `sid`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireEvent {
    pub i: u32,
    pub t: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<String>,
}

impl WireEvent {
    pub fn from_record(r: &EventRecord) -> Self {
        Self {
            i: r.event_index as u32,
            t: r.timestamp,
            x: r.position.map(|p| p.0),
            y: r.position.map(|p| p.1),
            p: r.url_path.clone(),
            d: r.dom_target.clone(),
        }
    }

    /// Validates the event and attaches it to a session.
    pub fn into_record(self, session_id: &str) -> Result<EventRecord, String> {
        if self.i as usize >= NUM_EVENTS {
            return Err(format!("event index {} is outside the catalog", self.i));
        }
        let position = match (self.x, self.y) {
            (Some(x), Some(y)) => Some((x, y)),
            (None, None) => None,
            _ => return Err("x and y must be present together".into()),
        };
        Ok(EventRecord {
            session_id: session_id.to_string(),
            event_index: self.i as u8,
            timestamp: self.t,
            position,
            url_path: self.p,
            dom_target: self.d,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct FileLine {
    sid: String,
    #[serde(flatten)]
    event: WireEvent,
}

/// Reads a trace file, grouping lines by session in first-seen order.
pub fn parse_trace_file<R: BufRead>(reader: R) -> Result<Vec<Trace>, TraceError> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<EventRecord>> = HashMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: FileLine = serde_json::from_str(&line).map_err(|e| TraceError::MalformedRecord {
            line: lineno,
            reason: e.to_string(),
        })?;
        let record = parsed
            .event
            .into_record(&parsed.sid)
            .map_err(|reason| TraceError::MalformedRecord { line: lineno, reason })?;
        groups
            .entry(parsed.sid.clone())
            .or_insert_with(|| {
                order.push(parsed.sid.clone());
                Vec::new()
            })
            .push(record);
    }
    if order.is_empty() {
        return Err(TraceError::EmptyInput);
    }
    order
        .into_iter()
        .map(|sid| {
            let records = groups.remove(&sid).unwrap_or_default();
            Trace::new(sid, records)
        })
        .collect()
}

/// Writes traces in file format and returns the number of bytes written.
pub fn serialize_trace_file<W: Write>(traces: &[Trace], mut writer: W) -> Result<usize, TraceError> {
    let mut written = 0;
    for trace in traces {
        for r in trace.records() {
            let line = FileLine {
                sid: r.session_id.clone(),
                event: WireEvent::from_record(r),
            };
            let mut bytes = serde_json::to_vec(&line).expect("trace line serializes");
            bytes.push(b'\n');
            writer.write_all(&bytes)?;
            written += bytes.len();
        }
    }
    writer.flush()?;
    Ok(written)
}

/// Reads a `sid,label` sidecar. A header row `sid,label` is accepted.
pub fn read_labels<R: std::io::Read>(reader: R) -> Result<HashMap<String, AgentLabel>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut labels = HashMap::new();
    for row in rdr.records() {
        let row = row?;
        let (Some(sid), Some(label)) = (row.get(0), row.get(1)) else {
            continue;
        };
        if sid == "sid" && label == "label" {
            continue;
        }
        labels.insert(sid.to_string(), label.parse()?);
    }
    Ok(labels)
}

/// Writes the label sidecar for every labeled trace.
pub fn write_labels<W: Write>(traces: &[Trace], writer: W) -> Result<(), TraceError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["sid", "label"])?;
    for t in traces {
        if let Some(label) = &t.label {
            wtr.write_record([t.session_id(), &label.to_string()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Attaches sidecar labels to traces by session id.
pub fn apply_labels(traces: &mut [Trace], labels: &HashMap<String, AgentLabel>) {
    for t in traces {
        if let Some(l) = labels.get(t.session_id()) {
            t.label = Some(l.clone());
        }
    }
}
