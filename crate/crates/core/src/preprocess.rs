//! Turning raw traces into finite-alphabet symbol streams.
//!
//! The pipeline per trace is: kinematics (per-axis velocity and inter-arrival
//! time, with missing positions backfilled from the last known pointer
//! location), equal-frequency quantization of `vx`, `vy` and `dt`,
//! scalarization of `(event, qvx, qvy)` into a single symbol, and finally
//! replication of each symbol `dt_bin + 1` times.
//!
//! Quantizer edges are fitted once on a training pool and then frozen.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{EventRecord, Trace, NUM_EVENTS};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
    #[error("need at least {needed} pooled elements to fit the quantizer, got {available}")]
    InsufficientData { needed: usize, available: usize },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("quantizer was fitted with different bin counts than the config")]
    QuantizerMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub bins_vx: usize,
    pub bins_vy: usize,
    pub bins_dt: usize,
    /// Traces longer than this many records are truncated.
    pub max_elements: usize,
}

impl PreprocessConfig {
    /// Settings used for offline clustering: 3 bins per velocity axis and
    /// 15 inter-arrival bins.
    pub const CLUSTERING: PreprocessConfig = PreprocessConfig {
        bins_vx: 3,
        bins_vy: 3,
        bins_dt: 15,
        max_elements: 10_000,
    };

    /// Settings used for sequential detection: 2 bins per velocity axis.
    pub const DETECTION: PreprocessConfig = PreprocessConfig {
        bins_vx: 2,
        bins_vy: 2,
        bins_dt: 3,
        max_elements: 10_000,
    };

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.bins_vx == 0 || self.bins_vy == 0 || self.bins_dt == 0 {
            return Err(PreprocessError::InvalidConfig("bin counts must be >= 1".into()));
        }
        if self.max_elements == 0 {
            return Err(PreprocessError::InvalidConfig("max_elements must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of velocity direction cells (`dir` values).
    pub fn dir_count(&self) -> usize {
        self.bins_vx * self.bins_vy
    }

    pub fn alphabet_size(&self) -> usize {
        NUM_EVENTS * self.dir_count()
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self::CLUSTERING
    }
}

/// Per-event kinematic features of a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicSequence {
    pub event_index: Vec<u8>,
    pub timestamp: Vec<u64>,
    /// Pixels per second.
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
    /// Seconds since the previous event.
    pub dt: Vec<f64>,
    pub x: Vec<i64>,
    pub y: Vec<i64>,
}

impl KinematicSequence {
    pub fn len(&self) -> usize {
        self.event_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.event_index.is_empty()
    }
}

/// Incremental kinematics: consumes records one at a time.
#[derive(Clone, Debug, Default)]
struct KinematicState {
    last_position: Option<(i64, i64)>,
    last_timestamp: Option<u64>,
}

struct Kinematic {
    vx: f64,
    vy: f64,
    dt: f64,
    x: i64,
    y: i64,
}

impl KinematicState {
    fn step(&mut self, r: &EventRecord) -> Kinematic {
        let dt = match self.last_timestamp {
            Some(prev) => r.timestamp.saturating_sub(prev) as f64 / 1000.0,
            None => 0.0,
        };
        self.last_timestamp = Some(r.timestamp);

        let (x, y) = r.position.or(self.last_position).unwrap_or((0, 0));
        // No velocity until a real position has been seen on both ends.
        let (vx, vy) = match (self.last_position, dt > 0.0) {
            (Some((px, py)), true) => ((x - px) as f64 / dt, (y - py) as f64 / dt),
            _ => (0.0, 0.0),
        };
        if r.position.is_some() {
            self.last_position = r.position;
        }
        Kinematic { vx, vy, dt, x, y }
    }
}

pub fn compute_kinematics(trace: &Trace) -> KinematicSequence {
    compute_kinematics_of(trace.records())
}

fn compute_kinematics_of(records: &[EventRecord]) -> KinematicSequence {
    let n = records.len();
    let mut seq = KinematicSequence {
        event_index: Vec::with_capacity(n),
        timestamp: Vec::with_capacity(n),
        vx: Vec::with_capacity(n),
        vy: Vec::with_capacity(n),
        dt: Vec::with_capacity(n),
        x: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
    };
    let mut state = KinematicState::default();
    for r in records {
        let k = state.step(r);
        seq.event_index.push(r.event_index);
        seq.timestamp.push(r.timestamp);
        seq.vx.push(k.vx);
        seq.vy.push(k.vy);
        seq.dt.push(k.dt);
        seq.x.push(k.x);
        seq.y.push(k.y);
    }
    seq
}

/// Frozen quantization cut points for the three continuous channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerModel {
    pub edges_vx: Vec<f64>,
    pub edges_vy: Vec<f64>,
    pub edges_dt: Vec<f64>,
    pub fitted_on: usize,
}

impl QuantizerModel {
    fn matches(&self, config: &PreprocessConfig) -> bool {
        self.edges_vx.len() + 1 == config.bins_vx
            && self.edges_vy.len() + 1 == config.bins_vy
            && self.edges_dt.len() + 1 == config.bins_dt
    }
}

/// Equal-frequency cut points: for each fraction `j/bins` the edge sits at
/// the midpoint of the two order statistics straddling it.
pub fn equal_frequency_edges(values: &[f64], bins: usize) -> Result<Vec<f64>, PreprocessError> {
    if bins == 0 {
        return Err(PreprocessError::InvalidConfig("bin count must be >= 1".into()));
    }
    if values.len() < bins {
        return Err(PreprocessError::InsufficientData {
            needed: bins,
            available: values.len(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok((1..bins)
        .map(|j| {
            let k = (j * n / bins).clamp(1, n - 1);
            0.5 * (sorted[k - 1] + sorted[k])
        })
        .collect())
}

pub fn fit_quantizer(
    kinematics: &[KinematicSequence],
    config: &PreprocessConfig,
) -> Result<QuantizerModel, PreprocessError> {
    config.validate()?;
    let pool = |f: fn(&KinematicSequence) -> &Vec<f64>| -> Vec<f64> {
        kinematics
            .iter()
            .flat_map(|k| f(k).iter().take(config.max_elements).copied())
            .collect()
    };
    let vx = pool(|k| &k.vx);
    let vy = pool(|k| &k.vy);
    let dt = pool(|k| &k.dt);
    let needed = config.bins_vx.max(config.bins_vy).max(config.bins_dt);
    if vx.len() < needed {
        return Err(PreprocessError::InsufficientData {
            needed,
            available: vx.len(),
        });
    }
    Ok(QuantizerModel {
        edges_vx: equal_frequency_edges(&vx, config.bins_vx)?,
        edges_vy: equal_frequency_edges(&vy, config.bins_vy)?,
        edges_dt: equal_frequency_edges(&dt, config.bins_dt)?,
        fitted_on: vx.len(),
    })
}

/// Bin index of `value`: the number of edges strictly below it, so a value
/// lying exactly on an edge falls into the lower bin.
pub fn quantize(value: f64, edges: &[f64]) -> usize {
    edges.partition_point(|e| *e < value)
}

/// Packs `(event, qvx, qvy)` into one symbol:
/// `event * (bins_vx * bins_vy) + qvx * bins_vy + qvy`.
pub fn scalarize(event_index: u8, qvx: usize, qvy: usize, config: &PreprocessConfig) -> Result<u32, PreprocessError> {
    if event_index as usize >= NUM_EVENTS {
        return Err(PreprocessError::OutOfRange(format!("event index {event_index}")));
    }
    if qvx >= config.bins_vx || qvy >= config.bins_vy {
        return Err(PreprocessError::OutOfRange(format!("velocity bins ({qvx}, {qvy})")));
    }
    let dir = qvx * config.bins_vy + qvy;
    Ok((event_index as usize * config.dir_count() + dir) as u32)
}

/// Inverse of [`scalarize`].
pub fn decompose(symbol: u32, config: &PreprocessConfig) -> Result<(u8, usize, usize), PreprocessError> {
    let symbol = symbol as usize;
    if symbol >= config.alphabet_size() {
        return Err(PreprocessError::OutOfRange(format!("symbol {symbol}")));
    }
    let dir = symbol % config.dir_count();
    Ok((
        (symbol / config.dir_count()) as u8,
        dir / config.bins_vy,
        dir % config.bins_vy,
    ))
}

/// Repeats each symbol `dt_bin + 1` times.
pub fn replicate_by_interarrival(symbols: &[u32], dt_bins: &[usize]) -> Vec<u32> {
    debug_assert_eq!(symbols.len(), dt_bins.len());
    let total: usize = dt_bins.iter().map(|b| b + 1).sum();
    let mut out = Vec::with_capacity(total);
    for (&s, &b) in symbols.iter().zip(dt_bins) {
        out.extend(std::iter::repeat_n(s, b + 1));
    }
    out
}

/// The symbol stream of one trace plus the features it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessedTrace {
    pub symbols: Vec<u32>,
    /// For each symbol, the index of the source record.
    pub origin: Vec<u32>,
    pub raw: KinematicSequence,
    pub alphabet_size: usize,
}

impl ProcessedTrace {
    /// Milliseconds from trace start to the record that produced symbol `k`.
    pub fn elapsed_ms(&self, k: usize) -> u64 {
        let rec = self.origin[k] as usize;
        self.raw.timestamp[rec] - self.raw.timestamp[0]
    }
}

pub fn preprocess(
    trace: &Trace,
    quantizer: &QuantizerModel,
    config: &PreprocessConfig,
) -> Result<ProcessedTrace, PreprocessError> {
    config.validate()?;
    if !quantizer.matches(config) {
        return Err(PreprocessError::QuantizerMismatch);
    }
    let records = &trace.records()[..trace.len().min(config.max_elements)];
    let raw = compute_kinematics_of(records);
    let mut base = Vec::with_capacity(raw.len());
    let mut dt_bins = Vec::with_capacity(raw.len());
    for k in 0..raw.len() {
        let qvx = quantize(raw.vx[k], &quantizer.edges_vx);
        let qvy = quantize(raw.vy[k], &quantizer.edges_vy);
        base.push(scalarize(raw.event_index[k], qvx, qvy, config)?);
        dt_bins.push(quantize(raw.dt[k], &quantizer.edges_dt));
    }
    let symbols = replicate_by_interarrival(&base, &dt_bins);
    let origin = dt_bins
        .iter()
        .enumerate()
        .flat_map(|(k, &b)| std::iter::repeat_n(k as u32, b + 1))
        .collect();
    Ok(ProcessedTrace {
        symbols,
        origin,
        raw,
        alphabet_size: config.alphabet_size(),
    })
}

/// A fitted, shippable preprocessing pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub config: PreprocessConfig,
    pub quantizer: QuantizerModel,
}

impl Pipeline {
    pub fn fit(traces: &[Trace], config: PreprocessConfig) -> Result<Self, PreprocessError> {
        config.validate()?;
        let kin: Vec<_> = traces
            .iter()
            .map(|t| compute_kinematics_of(&t.records()[..t.len().min(config.max_elements)]))
            .collect();
        let quantizer = fit_quantizer(&kin, &config)?;
        Ok(Self { config, quantizer })
    }

    pub fn process(&self, trace: &Trace) -> Result<ProcessedTrace, PreprocessError> {
        preprocess(trace, &self.quantizer, &self.config)
    }

    pub fn alphabet_size(&self) -> usize {
        self.config.alphabet_size()
    }

    pub fn stream(&self) -> StreamingPreprocessor<'_> {
        StreamingPreprocessor {
            pipeline: self,
            cursor: StreamCursor::default(),
        }
    }
}

/// Owned per-session streaming state; the pipeline is passed on each push.
#[derive(Clone, Debug, Default)]
pub struct StreamCursor {
    state: KinematicState,
    consumed: usize,
}

impl StreamCursor {
    /// Symbols contributed by `record`; empty once `max_elements` is reached.
    pub fn push(&mut self, pipeline: &Pipeline, record: &EventRecord) -> Result<Vec<u32>, PreprocessError> {
        let Pipeline { config, quantizer } = pipeline;
        if self.consumed >= config.max_elements {
            return Ok(Vec::new());
        }
        self.consumed += 1;
        let k = self.state.step(record);
        let symbol = scalarize(
            record.event_index,
            quantize(k.vx, &quantizer.edges_vx),
            quantize(k.vy, &quantizer.edges_vy),
            config,
        )?;
        let reps = quantize(k.dt, &quantizer.edges_dt) + 1;
        Ok(vec![symbol; reps])
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }
}

/// Record-at-a-time preprocessing, equivalent to [`preprocess`] on the
/// growing prefix.
pub struct StreamingPreprocessor<'a> {
    pipeline: &'a Pipeline,
    cursor: StreamCursor,
}

impl StreamingPreprocessor<'_> {
    pub fn push(&mut self, record: &EventRecord) -> Result<Vec<u32>, PreprocessError> {
        self.cursor.push(self.pipeline, record)
    }

    pub fn consumed(&self) -> usize {
        self.cursor.consumed()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{catalog_lookup, EventRecord};
    use proptest::prelude::*;

    fn login_trace() -> Trace {
        // 2023-01-14 17:57:34.980 and following, as epoch ms
        let t0 = 1_673_719_054_980u64;
        Trace::new(
            "s",
            vec![
                EventRecord::new("s", catalog_lookup("mousemove").unwrap(), t0).at(456, 490),
                EventRecord::new("s", catalog_lookup("click").unwrap(), t0 + 335).at(482, 425),
                EventRecord::new("s", catalog_lookup("keypress").unwrap(), t0 + 530),
                EventRecord::new("s", catalog_lookup("keypress").unwrap(), t0 + 605),
                EventRecord::new("s", catalog_lookup("submit").unwrap(), t0 + 605),
            ],
        )
        .unwrap()
    }

    #[test]
    fn login_kinematics() {
        let k = compute_kinematics(&login_trace());
        assert_eq!(k.event_index, vec![2, 14, 13, 13, 19]);
        assert_eq!(k.x, vec![456, 482, 482, 482, 482]);
        assert_eq!(k.y, vec![490, 425, 425, 425, 425]);
        assert_eq!(k.dt, vec![0.0, 0.335, 0.195, 0.075, 0.0]);
        assert!((k.vx[1] - 77.6119).abs() < 1e-3);
        assert!((k.vy[1] + 194.0299).abs() < 1e-3);
        assert_eq!((k.vx[0], k.vy[0]), (0.0, 0.0));
        assert_eq!(&k.vx[2..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn stationary_clicks() {
        let t = Trace::new(
            "s",
            vec![
                EventRecord::new("s", 14, 1000).at(5, 5),
                EventRecord::new("s", 14, 2000).at(5, 5),
            ],
        )
        .unwrap();
        let k = compute_kinematics(&t);
        assert_eq!(k.vx, vec![0.0, 0.0]);
        assert_eq!(k.vy, vec![0.0, 0.0]);
        assert_eq!(k.dt, vec![0.0, 1.0]);
    }

    #[test]
    fn backfill_and_leading_missing() {
        let t = Trace::new(
            "s",
            vec![
                EventRecord::new("s", 25, 0),
                EventRecord::new("s", 2, 100).at(10, 20),
                EventRecord::new("s", 11, 200),
            ],
        )
        .unwrap();
        let k = compute_kinematics(&t);
        assert_eq!((k.x[0], k.y[0]), (0, 0));
        // first real position: no velocity from the placeholder
        assert_eq!((k.vx[1], k.vy[1]), (0.0, 0.0));
        assert_eq!((k.x[2], k.y[2]), (10, 20));
        assert_eq!((k.vx[2], k.vy[2]), (0.0, 0.0));
    }

    #[test]
    fn zero_dt_has_zero_velocity() {
        let t = Trace::new(
            "s",
            vec![
                EventRecord::new("s", 2, 100).at(0, 0),
                EventRecord::new("s", 2, 100).at(50, 50),
            ],
        )
        .unwrap();
        let k = compute_kinematics(&t);
        assert_eq!((k.vx[1], k.vy[1], k.dt[1]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn edges_examples() {
        assert_eq!(equal_frequency_edges(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(), vec![2.5]);
        assert_eq!(equal_frequency_edges(&[3.0, 1.0, 4.0, 2.0], 2).unwrap(), vec![2.5]);
        let constant = equal_frequency_edges(&[7.0; 6], 2).unwrap();
        assert_eq!(constant, vec![7.0]);
        assert_eq!(quantize(7.0, &constant), 0);
        assert!(equal_frequency_edges(&[1.0, 2.0], 1).unwrap().is_empty());
        assert_eq!(quantize(1e9, &[]), 0);
        assert_eq!(
            equal_frequency_edges(&[1.0], 2),
            Err(PreprocessError::InsufficientData {
                needed: 2,
                available: 1
            })
        );
    }

    #[test]
    fn quantize_ties_and_extremes() {
        let edges = [1.0, 2.0, 3.0];
        assert_eq!(quantize(-5.0, &edges), 0);
        assert_eq!(quantize(9.0, &edges), 3);
        assert_eq!(quantize(2.0, &edges), 1);
        assert_eq!(quantize(2.0001, &edges), 2);
    }

    #[test]
    fn scalarize_examples() {
        let c = PreprocessConfig {
            bins_vx: 2,
            bins_vy: 2,
            bins_dt: 3,
            max_elements: 10,
        };
        assert_eq!(scalarize(0, 0, 0, &c).unwrap(), 0);
        assert_eq!(scalarize(2, 1, 1, &c).unwrap(), 11);
        assert_eq!(decompose(11, &c).unwrap(), (2, 1, 1));
        assert!(scalarize(43, 0, 0, &c).is_err());
        assert!(scalarize(1, 2, 0, &c).is_err());
        assert!(decompose(172, &c).is_err());
    }

    #[test]
    fn replication() {
        assert_eq!(replicate_by_interarrival(&[4, 5, 6], &[0, 0, 0]), vec![4, 5, 6]);
        assert_eq!(replicate_by_interarrival(&[9], &[2]), vec![9, 9, 9]);
        let out = replicate_by_interarrival(&[1, 2, 3], &[1, 0, 4]);
        assert_eq!(out.len(), 2 + 1 + 5);
    }

    #[test]
    fn login_event_row_and_single_event() {
        let trace = login_trace();
        let cfg = PreprocessConfig {
            bins_vx: 2,
            bins_vy: 2,
            bins_dt: 1,
            max_elements: 100,
        };
        let pipeline = Pipeline::fit(std::slice::from_ref(&trace), cfg).unwrap();
        let p = pipeline.process(&trace).unwrap();
        let events: Vec<_> = p.symbols.iter().map(|s| decompose(*s, &cfg).unwrap().0).collect();
        assert_eq!(events, vec![2, 14, 13, 13, 19]);

        let single = Trace::new("s", vec![EventRecord::new("s", 2, 0).at(1, 1)]).unwrap();
        let p1 = pipeline.process(&single).unwrap();
        let zero_dir = scalarize(
            2,
            quantize(0.0, &pipeline.quantizer.edges_vx),
            quantize(0.0, &pipeline.quantizer.edges_vy),
            &cfg,
        )
        .unwrap();
        assert_eq!(p1.symbols, vec![zero_dir]);
    }

    #[test]
    fn truncates_to_max_elements() {
        let recs: Vec<_> = (0..50)
            .map(|i| EventRecord::new("s", 2, i * 10).at(i as i64, 0))
            .collect();
        let t = Trace::new("s", recs).unwrap();
        let cfg = PreprocessConfig {
            bins_vx: 1,
            bins_vy: 1,
            bins_dt: 1,
            max_elements: 20,
        };
        let p = Pipeline::fit(std::slice::from_ref(&t), cfg)
            .unwrap()
            .process(&t)
            .unwrap();
        assert_eq!(p.symbols.len(), 20);
    }

    #[test]
    fn mismatched_quantizer_rejected() {
        let t = login_trace();
        let pipe = Pipeline::fit(
            std::slice::from_ref(&t),
            PreprocessConfig {
                bins_vx: 2,
                bins_vy: 2,
                bins_dt: 2,
                max_elements: 9,
            },
        )
        .unwrap();
        assert_eq!(
            preprocess(&t, &pipe.quantizer, &PreprocessConfig::CLUSTERING),
            Err(PreprocessError::QuantizerMismatch)
        );
    }

    fn arb_trace() -> impl Strategy<Value = Trace> {
        proptest::collection::vec(
            (0u8..43, 0u64..400, proptest::option::of((0i64..1920, 0i64..1080))),
            3..60,
        )
        .prop_map(|items| {
            let mut t = 0;
            let recs = items
                .into_iter()
                .map(|(e, gap, pos)| {
                    t += gap;
                    let mut r = EventRecord::new("p", e, t);
                    r.position = pos;
                    r
                })
                .collect();
            Trace::new("p", recs).unwrap()
        })
    }

    proptest! {
        #[test]
        fn quantize_is_monotone(mut edges in proptest::collection::vec(-100.0f64..100.0, 0..8), a in -200.0f64..200.0, b in -200.0f64..200.0) {
            edges.sort_by(f64::total_cmp);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize(lo, &edges) <= quantize(hi, &edges));
            prop_assert!(quantize(hi, &edges) <= edges.len());
        }

        #[test]
        fn equal_frequency_counts(values in proptest::collection::vec(-50i32..50, 10..200), bins in 1usize..8) {
            prop_assume!(values.len() >= bins);
            let values: Vec<f64> = values.into_iter().map(f64::from).collect();
            let edges = equal_frequency_edges(&values, bins).unwrap();
            prop_assert!(edges.windows(2).all(|w| w[0] <= w[1]));
            let mut counts = vec![0usize; bins];
            for v in &values {
                counts[quantize(*v, &edges)] += 1;
            }
            let n = values.len() as f64;
            for (j, c) in counts.iter().enumerate() {
                // slack: values tied at either edge of this bin
                let mut slack = 1.0;
                for e in [j.checked_sub(1).map(|i| edges[i]), edges.get(j).copied()].into_iter().flatten() {
                    slack += values.iter().filter(|v| **v == e).count() as f64;
                }
                let ideal = n / bins as f64;
                prop_assert!((*c as f64 - ideal).abs() <= slack + 1.0, "bin {} count {} ideal {} slack {}", j, c, ideal, slack);
            }
        }

        #[test]
        fn scalarize_bijective(e in 0u8..43, bx in 1usize..5, by in 1usize..5, a in 0usize..5, b in 0usize..5) {
            prop_assume!(a < bx && b < by);
            let c = PreprocessConfig { bins_vx: bx, bins_vy: by, bins_dt: 1, max_elements: 1 };
            let s = scalarize(e, a, b, &c).unwrap();
            prop_assert!((s as usize) < c.alphabet_size());
            prop_assert_eq!(decompose(s, &c).unwrap(), (e, a, b));
        }

        #[test]
        fn streaming_matches_batch(trace in arb_trace()) {
            let cfg = PreprocessConfig { bins_vx: 2, bins_vy: 3, bins_dt: 3, max_elements: 40 };
            let pipe = Pipeline::fit(std::slice::from_ref(&trace), cfg).unwrap();
            let batch = pipe.process(&trace).unwrap();
            let again = pipe.process(&trace).unwrap();
            prop_assert_eq!(&batch, &again);
            prop_assert!(batch.symbols.len() >= trace.len().min(40));
            let mut stream = pipe.stream();
            let mut symbols = Vec::new();
            for r in trace.records() {
                symbols.extend(stream.push(r).unwrap());
            }
            prop_assert_eq!(symbols, batch.symbols);
        }
    }
}
