//! Seeded synthetic agents. Each generator imitates one agent class
//! statistically: event mix, movement kinematics and inter-arrival structure.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};
use crate::trace::{events as ev, AgentLabel, EventRecord, Trace, TraceError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("unknown generator `{0}`")]
    UnknownGenerator(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Seconds of activity to generate.
    pub duration: f64,
    pub viewport: (u32, u32),
    pub seed: u64,
    pub session_id: String,
    /// Base cadence in events per second.
    pub rate: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration: 10.0,
            viewport: (1280, 720),
            seed: 0,
            session_id: "sim-0".into(),
            rate: 80.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.duration > 0.0) {
            return Err(SimError::InvalidConfig("duration must be > 0".into()));
        }
        if self.viewport.0 == 0 || self.viewport.1 == 0 {
            return Err(SimError::InvalidConfig("viewport must be positive".into()));
        }
        if !(self.rate > 0.0) {
            return Err(SimError::InvalidConfig("rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Accumulates records on a millisecond clock until the duration runs out.
struct Emitter {
    sid: String,
    t0: u64,
    now: f64,
    end: f64,
    width: f64,
    height: f64,
    path: String,
    records: Vec<EventRecord>,
}

impl Emitter {
    fn new(config: &SimConfig, rng: &mut Rng, path: &str) -> Self {
        Self {
            sid: config.session_id.clone(),
            t0: 1_700_000_000_000 + rng.random_range(0..86_400_000),
            now: 0.0,
            end: config.duration * 1000.0,
            width: config.viewport.0 as f64,
            height: config.viewport.1 as f64,
            path: path.to_string(),
            records: Vec::new(),
        }
    }

    fn done(&self) -> bool {
        self.now >= self.end
    }

    fn wait(&mut self, ms: f64) {
        self.now += ms.max(0.0);
    }

    fn clamp(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (x.clamp(0.0, self.width - 1.0), y.clamp(0.0, self.height - 1.0))
    }

    fn emit(&mut self, event: u8, pos: Option<(f64, f64)>, target: Option<&str>) {
        let at = self.now.round();
        if at >= self.end {
            return;
        }
        let mut r = EventRecord::new(&self.sid, event, self.t0 + at as u64).with_path(&self.path);
        if let Some(p) = pos {
            let (x, y) = self.clamp(p);
            r = r.at(x.round() as i64, y.round() as i64);
        }
        if let Some(t) = target {
            r = r.with_target(t);
        }
        self.records.push(r);
    }

    fn finish(self, label: AgentLabel) -> Result<Trace, SimError> {
        Ok(Trace::new(&self.sid, self.records)?.with_label(label))
    }
}

fn gaussian_target(rng: &mut Rng, e: &Emitter) -> (f64, f64) {
    let nx = Normal::new(e.width / 2.0, e.width / 6.0).expect("positive sigma");
    let ny = Normal::new(e.height / 2.0, e.height / 6.0).expect("positive sigma");
    e.clamp((nx.sample(rng), ny.sample(rng)))
}

fn uniform_point(rng: &mut Rng, e: &Emitter) -> (f64, f64) {
    (rng.random_range(0.0..e.width), rng.random_range(0.0..e.height))
}

/// Straight-line moves between Gaussian targets, one mousemove per tick.
const BOT_STEPS: usize = 3;
/// Mean extra delay (ms) the delayed bot adds to every tick.
const DELAY_JITTER_MS: f64 = 10.0;
/// Chance that the delayed bot sleeps after reaching a target.
const DELAY_PAUSE_PROB: f64 = 0.3;
const DELAY_PAUSE_MS: f64 = 40.0;

fn random_bot(config: &SimConfig, delayed: bool) -> Result<Trace, SimError> {
    config.validate()?;
    let mut rng = rng::seeded(config.seed);
    let mut e = Emitter::new(config, &mut rng, "/");
    let tick = 1000.0 / config.rate;
    let pause = Exp::new(1.0 / DELAY_PAUSE_MS).expect("positive rate");
    let jitter = Exp::new(1.0 / DELAY_JITTER_MS).expect("positive rate");
    let mut pos = gaussian_target(&mut rng, &e);
    e.emit(ev::MOUSEMOVE, Some(pos), None);
    while !e.done() {
        let target = gaussian_target(&mut rng, &e);
        for k in 1..=BOT_STEPS {
            let extra = if delayed { jitter.sample(&mut rng) } else { 0.0 };
            e.wait(tick + extra);
            let u = k as f64 / BOT_STEPS as f64;
            e.emit(
                ev::MOUSEMOVE,
                Some((pos.0 + (target.0 - pos.0) * u, pos.1 + (target.1 - pos.1) * u)),
                None,
            );
        }
        pos = target;
        if rng.random_bool(0.2) {
            e.wait(tick);
            e.emit(ev::CLICK, Some(pos), Some("body"));
        }
        if delayed && rng.random_bool(DELAY_PAUSE_PROB) {
            e.wait(pause.sample(&mut rng));
        }
    }
    let label = if delayed {
        AgentLabel::RandomDelayed
    } else {
        AgentLabel::RandomNaive
    };
    e.finish(label)
}

pub fn gen_random_naive(config: &SimConfig) -> Result<Trace, SimError> {
    random_bot(config, false)
}

/// The naive bot with a random delay added to every tick and occasional
/// exponential pauses between moves. Emits about half as many events.
pub fn gen_random_delayed(config: &SimConfig) -> Result<Trace, SimError> {
    random_bot(config, true)
}

/// Event mix of the UI fuzzer, as (event, probability).
pub const FUZZER_MIX: [(u8, f64); 7] = [
    (ev::MOUSEMOVE, 0.4),
    (ev::CLICK, 0.2),
    (ev::KEYDOWN, 0.1),
    (ev::KEYUP, 0.1),
    (ev::SCROLL, 0.1),
    (ev::CHANGE, 0.05),
    (ev::SELECT, 0.05),
];

const FUZZ_TARGETS: [&str; 5] = ["input#q", "select#lang", "button#go", "a.nav", "textarea#msg"];

/// Random interactions at a jittered tick of `rate` events per second.
pub fn gen_ui_fuzzer(config: &SimConfig) -> Result<Trace, SimError> {
    config.validate()?;
    let mut rng = rng::seeded(config.seed);
    let mut e = Emitter::new(config, &mut rng, "/");
    let tick = 1000.0 / config.rate;
    let weights: Vec<f64> = FUZZER_MIX.iter().map(|(_, w)| *w).collect();
    while !e.done() {
        let kind = FUZZER_MIX[rng::categorical(&weights, rng.random())].0;
        let target = FUZZ_TARGETS[rng.random_range(0..FUZZ_TARGETS.len())];
        match kind {
            ev::MOUSEMOVE | ev::CLICK => {
                let p = uniform_point(&mut rng, &e);
                e.emit(kind, Some(p), Some(target));
            }
            _ => e.emit(kind, None, Some(target)),
        }
        e.wait(tick * rng.random_range(0.5..1.5));
    }
    e.finish(AgentLabel::UiFuzzer)
}

const SCAN_FORMS: [(&str, &str, &[&str]); 4] = [
    ("/login", "login", &["user", "password"]),
    ("/register", "signup", &["email", "user", "password", "confirm"]),
    ("/search", "search", &["q"]),
    ("/contact", "contact", &["name", "email", "message"]),
];

/// Form-filling bursts (focus, keystrokes, change per field, then submit)
/// with near-zero spacing inside a burst and longer gaps between bursts.
pub fn gen_scanner(config: &SimConfig) -> Result<Trace, SimError> {
    config.validate()?;
    let mut rng = rng::seeded(config.seed);
    let mut e = Emitter::new(config, &mut rng, "/");
    let spacing = Exp::new(1.0).expect("positive rate");
    while !e.done() {
        let (path, form, fields) = SCAN_FORMS[rng.random_range(0..SCAN_FORMS.len())];
        e.path = path.to_string();
        if rng.random_bool(0.3) {
            let p = uniform_point(&mut rng, &e);
            e.emit(ev::MOUSEMOVE, Some(p), None);
        }
        for field in fields {
            let target = format!("form#{form} input[name={field}]");
            e.emit(ev::FOCUS, None, Some(&target));
            for _ in 0..rng.random_range(4..16) {
                e.wait(spacing.sample(&mut rng));
                e.emit(ev::KEYDOWN, None, Some(&target));
            }
            e.wait(spacing.sample(&mut rng));
            e.emit(ev::CHANGE, None, Some(&target));
            e.wait(spacing.sample(&mut rng));
        }
        e.emit(ev::SUBMIT, None, Some(&format!("form#{form}")));
        e.wait(rng.random_range(150.0..600.0));
    }
    e.finish(AgentLabel::Scanner)
}

/// Point-to-point reach with an early velocity peak, slight curvature and
/// positional jitter, sampled at a jittered tick.
fn human_reach(e: &mut Emitter, rng: &mut Rng, from: (f64, f64), to: (f64, f64), tick: f64) {
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    let dist = dx.hypot(dy);
    let duration = 150.0 + 0.8 * dist * rng.random_range(0.7..1.3);
    let bow = Normal::new(0.0, 0.08 * dist + 1.0).expect("positive sigma").sample(rng);
    let jitter = Normal::new(0.0, 0.3).expect("positive sigma");
    let (nx, ny) = if dist > 0.0 {
        (-dy / dist, dx / dist)
    } else {
        (0.0, 0.0)
    };
    let mut elapsed = 0.0;
    while elapsed < duration && !e.done() {
        let step = tick * rng.random_range(0.9..1.1);
        elapsed = (elapsed + step).min(duration);
        e.wait(step);
        let u = (elapsed / duration).powf(0.7);
        let s = u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
        let off = bow * (PI * s).sin();
        let p = (
            from.0 + dx * s + nx * off + jitter.sample(rng),
            from.1 + dy * s + ny * off + jitter.sample(rng),
        );
        e.emit(ev::MOUSEMOVE, Some(p), None);
    }
}

/// Stand-in for human visitors: curved reaches, clicks, dwell times mixing
/// short and long pauses, and interleaved scrolling and typing.
pub fn gen_humanlike(config: &SimConfig) -> Result<Trace, SimError> {
    config.validate()?;
    let mut rng = rng::seeded(config.seed);
    let mut e = Emitter::new(config, &mut rng, "/survey");
    let tick = 1000.0 / (0.75 * config.rate);
    let mut pos = uniform_point(&mut rng, &e);
    e.emit(ev::LOAD, None, None);
    e.wait(rng.random_range(300.0..900.0));
    let press = Normal::<f64>::new(95.0, 20.0).expect("positive sigma");
    let gap = Normal::<f64>::new(180.0, 60.0).expect("positive sigma");
    let mut since_long = 3;
    while !e.done() {
        let target = uniform_point(&mut rng, &e);
        human_reach(&mut e, &mut rng, pos, target, tick);
        pos = target;
        if rng.random_bool(0.5) {
            e.wait(rng.random_range(60.0..200.0));
            e.emit(ev::MOUSEDOWN, Some(pos), Some("label.option"));
            e.wait(press.sample(&mut rng).max(30.0));
            e.emit(ev::MOUSEUP, Some(pos), Some("label.option"));
            e.emit(ev::CLICK, Some(pos), Some("label.option"));
        }
        if rng.random_bool(0.35) {
            for _ in 0..rng.random_range(3..10) {
                e.wait(rng.random_range(30.0..80.0));
                e.emit(ev::SCROLL, Some(pos), None);
            }
        }
        if rng.random_bool(0.35) {
            e.emit(ev::FOCUS, None, Some("textarea#comments"));
            for _ in 0..rng.random_range(3..10) {
                e.wait(gap.sample(&mut rng).max(40.0));
                e.emit(ev::KEYDOWN, None, Some("textarea#comments"));
                e.wait(press.sample(&mut rng).max(30.0));
                e.emit(ev::KEYUP, None, Some("textarea#comments"));
            }
        }
        // the first dwell is long, then at most three short ones in a row
        let dwell = if since_long < 3 && rng.random_bool(0.7) {
            since_long += 1;
            rng.random_range(100.0..300.0)
        } else {
            since_long = 0;
            rng.random_range(1000.0..5000.0)
        };
        e.wait(dwell);
    }
    e.finish(AgentLabel::Human)
}

/// Scripted human imitation: symmetric smooth reaches at a steady tick,
/// regular dwell, fixed-step wheel scrolling and metronomic typing.
pub fn gen_crawler(config: &SimConfig) -> Result<Trace, SimError> {
    config.validate()?;
    let mut rng = rng::seeded(config.seed);
    let mut e = Emitter::new(config, &mut rng, "/");
    let tick = 1000.0 / (1.25 * config.rate);
    let mut pos = uniform_point(&mut rng, &e);
    while !e.done() {
        let action = rng.random_range(0..10);
        if action < 6 {
            let target = uniform_point(&mut rng, &e);
            let (dx, dy) = (target.0 - pos.0, target.1 - pos.1);
            let steps = ((300.0 + 0.5 * dx.hypot(dy)) / tick).ceil() as usize;
            for k in 1..=steps {
                e.wait(tick);
                let u = k as f64 / steps as f64;
                let s = u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
                e.emit(ev::MOUSEMOVE, Some((pos.0 + dx * s, pos.1 + dy * s)), None);
            }
            pos = target;
            e.wait(50.0);
            e.emit(ev::MOUSEDOWN, Some(pos), Some("a.link"));
            e.wait(50.0);
            e.emit(ev::MOUSEUP, Some(pos), Some("a.link"));
            e.emit(ev::CLICK, Some(pos), Some("a.link"));
        } else if action < 8 {
            for _ in 0..5 {
                e.wait(50.0);
                e.emit(ev::WHEEL, Some(pos), None);
                e.emit(ev::SCROLL, Some(pos), None);
            }
        } else {
            for _ in 0..rng.random_range(4..12) {
                e.wait(100.0);
                e.emit(ev::KEYDOWN, None, Some("input#search"));
                e.emit(ev::KEYPRESS, None, Some("input#search"));
                e.wait(20.0);
                e.emit(ev::KEYUP, None, Some("input#search"));
            }
        }
        e.wait(rng.random_range(400.0..900.0));
    }
    e.finish(AgentLabel::Crawler)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Humanlike,
    UiFuzzer,
    Scanner,
    RandomNaive,
    RandomDelayed,
    Crawler,
}

impl Generator {
    pub const ALL: [Generator; 6] = [
        Generator::Humanlike,
        Generator::UiFuzzer,
        Generator::Scanner,
        Generator::RandomNaive,
        Generator::RandomDelayed,
        Generator::Crawler,
    ];

    /// The five classes of the base synthetic corpus.
    pub const BASE: [Generator; 5] = [
        Generator::Humanlike,
        Generator::UiFuzzer,
        Generator::Scanner,
        Generator::RandomNaive,
        Generator::Crawler,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Generator::Humanlike => "humanlike",
            Generator::UiFuzzer => "ui_fuzzer",
            Generator::Scanner => "scanner",
            Generator::RandomNaive => "random_naive",
            Generator::RandomDelayed => "random_delayed",
            Generator::Crawler => "crawler",
        }
    }

    pub fn label(&self) -> AgentLabel {
        match self {
            Generator::Humanlike => AgentLabel::Human,
            Generator::UiFuzzer => AgentLabel::UiFuzzer,
            Generator::Scanner => AgentLabel::Scanner,
            Generator::RandomNaive => AgentLabel::RandomNaive,
            Generator::RandomDelayed => AgentLabel::RandomDelayed,
            Generator::Crawler => AgentLabel::Crawler,
        }
    }

    pub fn generate(&self, config: &SimConfig) -> Result<Trace, SimError> {
        match self {
            Generator::Humanlike => gen_humanlike(config),
            Generator::UiFuzzer => gen_ui_fuzzer(config),
            Generator::Scanner => gen_scanner(config),
            Generator::RandomNaive => gen_random_naive(config),
            Generator::RandomDelayed => gen_random_delayed(config),
            Generator::Crawler => gen_crawler(config),
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Generator {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Generator::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| SimError::UnknownGenerator(s.to_string()))
    }
}

/// Runs `generator`, lengthening the duration until the trace holds at least
/// `min_events` records. Traces are prefix-stable in the duration, so the
/// result extends the one `config` alone would give.
pub fn generate_min_events(generator: Generator, config: &SimConfig, min_events: usize) -> Result<Trace, SimError> {
    let mut config = config.clone();
    loop {
        let trace = generator.generate(&config)?;
        if trace.len() >= min_events {
            return Ok(trace);
        }
        let grow = (1.1 * min_events as f64 / trace.len() as f64).max(1.1);
        config.duration *= grow;
    }
}

/// `per_class` labeled traces for each generator. Session ids are
/// `<generator>-<n>` and seeds are derived from `base_seed`. Traces are
/// lengthened as needed to reach `min_events` records.
pub fn generate_corpus(
    generators: &[Generator],
    per_class: usize,
    base_seed: u64,
    template: &SimConfig,
    min_events: usize,
) -> Result<Vec<Trace>, SimError> {
    let mut out = Vec::with_capacity(generators.len() * per_class);
    for (c, g) in generators.iter().enumerate() {
        for i in 0..per_class {
            let config = SimConfig {
                seed: rng::derive_seed(base_seed, &[c as u64, i as u64]),
                session_id: format!("{}-{i}", g.name()),
                ..template.clone()
            };
            out.push(generate_min_events(*g, &config, min_events)?);
        }
    }
    Ok(out)
}
