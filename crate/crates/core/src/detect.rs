//! Real-time sequential classification against a bank of per-class HMMs.

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hmm::{baum_welch_fit, ForwardState, Hmm, HmmError, InitScheme, TrainConfig};
use crate::preprocess::{Pipeline, PreprocessConfig, PreprocessError, ProcessedTrace, StreamCursor};
use crate::trace::{AgentLabel, EventRecord, Trace};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("class {0} has no training traces")]
    EmptyClass(AgentLabel),
    #[error("a bank needs at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("duplicate class label {0}")]
    DuplicateLabel(AgentLabel),
    #[error("class models disagree on alphabet size")]
    AlphabetMismatch,
    #[error("no symbols observed yet")]
    NoSymbols,
    #[error("empty symbol stream")]
    EmptyStream,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Hmm(#[from] HmmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankClass {
    pub label: AgentLabel,
    pub model: Hmm,
}

/// Checks the class-list invariants shared by every bank.
pub fn validate_classes(classes: &[BankClass]) -> Result<usize, DetectError> {
    if classes.len() < 2 {
        return Err(DetectError::TooFewClasses(classes.len()));
    }
    let alphabet = classes[0].model.alphabet_size();
    let mut seen = HashSet::new();
    for c in classes {
        if c.model.alphabet_size() != alphabet {
            return Err(DetectError::AlphabetMismatch);
        }
        if !seen.insert(&c.label) {
            return Err(DetectError::DuplicateLabel(c.label.clone()));
        }
    }
    Ok(alphabet)
}

/// Labeled class models plus the frozen preprocessing they were trained with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierBank {
    pub pipeline: Pipeline,
    pub classes: Vec<BankClass>,
}

impl ClassifierBank {
    pub fn new(pipeline: Pipeline, classes: Vec<BankClass>) -> Result<Self, DetectError> {
        let alphabet = validate_classes(&classes)?;
        if alphabet != pipeline.alphabet_size() {
            return Err(DetectError::AlphabetMismatch);
        }
        Ok(Self { pipeline, classes })
    }

    pub fn labels(&self) -> impl Iterator<Item = &AgentLabel> {
        self.classes.iter().map(|c| &c.label)
    }

    pub fn process(&self, trace: &Trace) -> Result<ProcessedTrace, DetectError> {
        Ok(self.pipeline.process(trace)?)
    }

    pub fn classify(&self, processed: &ProcessedTrace, rule: StopRule) -> Result<Decision, DetectError> {
        let stream = timed_symbols(processed);
        match rule {
            StopRule::Margin { gamma } => classify_margin(&self.classes, stream, gamma),
            StopRule::Repeat { q } => classify_repeat(&self.classes, stream, q),
        }
    }

    pub fn to_json(&self) -> Result<String, DetectError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, DetectError> {
        let raw: Self = serde_json::from_str(s)?;
        for c in &raw.classes {
            c.model.validate()?;
        }
        Self::new(raw.pipeline, raw.classes)
    }
}

/// Fits one quantizer on all training traces pooled, then one HMM per class
/// on that class's processed traces. Every class uses the same seed.
pub fn fit_bank(
    groups: &[(AgentLabel, Vec<Trace>)],
    train: &TrainConfig,
    preprocess: PreprocessConfig,
) -> Result<ClassifierBank, DetectError> {
    if groups.len() < 2 {
        return Err(DetectError::TooFewClasses(groups.len()));
    }
    if let Some((label, _)) = groups.iter().find(|(_, t)| t.is_empty()) {
        return Err(DetectError::EmptyClass(label.clone()));
    }
    let pooled: Vec<Trace> = groups.iter().flat_map(|(_, t)| t.iter().cloned()).collect();
    let pipeline = Pipeline::fit(&pooled, preprocess)?;
    let alphabet = pipeline.alphabet_size();
    let classes = groups
        .par_iter()
        .map(|(label, traces)| {
            let processed = traces
                .iter()
                .map(|t| pipeline.process(t))
                .collect::<Result<Vec<_>, _>>()?;
            let seqs: Vec<&[u32]> = processed.iter().map(|p| p.symbols.as_slice()).collect();
            let model = baum_welch_fit(&seqs, Some(alphabet), train)?;
            Ok(BankClass {
                label: label.clone(),
                model,
            })
        })
        .collect::<Result<Vec<_>, DetectError>>()?;
    ClassifierBank::new(pipeline, classes)
}

/// Per-session running likelihoods, one forward recursion per class.
#[derive(Clone, Debug)]
pub struct SessionState {
    forward: Vec<ForwardState>,
    symbols_seen: usize,
    elapsed_ms: u64,
}

impl SessionState {
    pub fn new(classes: &[BankClass]) -> Self {
        Self {
            forward: classes.iter().map(|c| c.model.start()).collect(),
            symbols_seen: 0,
            elapsed_ms: 0,
        }
    }

    pub fn update(&mut self, classes: &[BankClass], symbol: u32, elapsed_ms: u64) -> Result<(), DetectError> {
        if let Some(c) = classes.iter().find(|c| symbol as usize >= c.model.alphabet_size()) {
            return Err(HmmError::SymbolOutOfRange {
                symbol,
                alphabet_size: c.model.alphabet_size(),
            }
            .into());
        }
        for (c, f) in classes.iter().zip(&mut self.forward) {
            c.model.forward_step(f, symbol)?;
        }
        self.symbols_seen += 1;
        self.elapsed_ms = elapsed_ms;
        Ok(())
    }

    pub fn symbols_seen(&self) -> usize {
        self.symbols_seen
    }

    pub fn elapsed_ms(&self) -> u64 {
        self.elapsed_ms
    }

    pub fn log_likelihoods(&self) -> Vec<f64> {
        self.forward.iter().map(|f| f.log_likelihood()).collect()
    }

    /// Index of the most likely class; ties go to the lowest index.
    pub fn argmax(&self) -> Result<usize, DetectError> {
        if self.symbols_seen == 0 {
            return Err(DetectError::NoSymbols);
        }
        Ok(argmax(&self.log_likelihoods()))
    }

    /// Gap between the best and second-best class log-likelihood.
    pub fn margin(&self) -> Result<f64, DetectError> {
        if self.symbols_seen == 0 {
            return Err(DetectError::NoSymbols);
        }
        Ok(top_two_gap(&self.log_likelihoods()))
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn top_two_gap(values: &[f64]) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in values {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    if first == f64::NEG_INFINITY {
        0.0
    } else {
        first - second
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Margin,
    Repeat,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StopRule {
    Margin { gamma: f64 },
    Repeat { q: usize },
}

impl StopRule {
    pub fn kind(&self) -> RuleKind {
        match self {
            StopRule::Margin { .. } => RuleKind::Margin,
            StopRule::Repeat { .. } => RuleKind::Repeat,
        }
    }

    pub fn parameter(&self) -> f64 {
        match *self {
            StopRule::Margin { gamma } => gamma,
            StopRule::Repeat { q } => q as f64,
        }
    }
}

pub const DEFAULT_GAMMA_GRID: [f64; 6] = [0.0, 1.0, 2.0, 5.0, 10.0, 20.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub label: AgentLabel,
    /// 1-based index of the symbol at which the rule fired.
    pub stop_symbol_index: usize,
    /// Milliseconds since session start at the stopping symbol.
    pub stop_time: u64,
    /// Final top-two gap in nats for the margin rule, run length for the repeat rule.
    pub margin: f64,
    pub rule: RuleKind,
    /// The stream ended before the rule fired.
    pub timeout: bool,
}

/// Pairs each symbol with the trace time of the record it came from.
pub fn timed_symbols(p: &ProcessedTrace) -> impl Iterator<Item = (u32, u64)> + '_ {
    p.symbols.iter().enumerate().map(|(k, &s)| (s, p.elapsed_ms(k)))
}

/// Stops at the first symbol where the top-two gap exceeds `gamma`.
pub fn classify_margin(
    classes: &[BankClass],
    stream: impl IntoIterator<Item = (u32, u64)>,
    gamma: f64,
) -> Result<Decision, DetectError> {
    if !(gamma >= 0.0) {
        return Err(DetectError::InvalidParameter(format!(
            "gamma must be >= 0, got {gamma}"
        )));
    }
    validate_classes(classes)?;
    let mut state = SessionState::new(classes);
    for (symbol, t) in stream {
        state.update(classes, symbol, t)?;
        let margin = state.margin()?;
        if margin > gamma {
            return Ok(decide(classes, &state, margin, RuleKind::Margin, false));
        }
    }
    if state.symbols_seen == 0 {
        return Err(DetectError::EmptyStream);
    }
    let margin = state.margin()?;
    Ok(decide(classes, &state, margin, RuleKind::Margin, true))
}

/// Run-length counter over successive predicted labels.
#[derive(Clone, Debug, Default)]
pub struct RepeatCounter {
    current: Option<usize>,
    count: usize,
}

impl RepeatCounter {
    /// Records the next prediction and returns the current run length.
    pub fn observe(&mut self, label: usize) -> usize {
        if self.current == Some(label) {
            self.count += 1;
        } else {
            self.current = Some(label);
            self.count = 1;
        }
        self.count
    }
}

/// Stops once the argmax label has been the same for `q` consecutive symbols.
pub fn classify_repeat(
    classes: &[BankClass],
    stream: impl IntoIterator<Item = (u32, u64)>,
    q: usize,
) -> Result<Decision, DetectError> {
    if q == 0 {
        return Err(DetectError::InvalidParameter("q must be >= 1".into()));
    }
    validate_classes(classes)?;
    let mut state = SessionState::new(classes);
    let mut counter = RepeatCounter::default();
    let mut run = 0;
    for (symbol, t) in stream {
        state.update(classes, symbol, t)?;
        run = counter.observe(state.argmax()?);
        if run >= q {
            return Ok(decide(classes, &state, run as f64, RuleKind::Repeat, false));
        }
    }
    if state.symbols_seen == 0 {
        return Err(DetectError::EmptyStream);
    }
    Ok(decide(classes, &state, run as f64, RuleKind::Repeat, true))
}

fn decide(classes: &[BankClass], state: &SessionState, margin: f64, rule: RuleKind, timeout: bool) -> Decision {
    Decision {
        label: classes[argmax(&state.log_likelihoods())].label.clone(),
        stop_symbol_index: state.symbols_seen,
        stop_time: state.elapsed_ms,
        margin,
        rule,
        timeout,
    }
}

/// Live detection for one session: raw records in, running verdict out.
/// The margin rule latches: once the gap exceeds `gamma` the verdict at that
/// symbol is kept, as [`classify_margin`] would return it.
#[derive(Clone, Debug)]
pub struct LiveSession {
    cursor: StreamCursor,
    state: SessionState,
    start: Option<u64>,
    gamma: f64,
    fired: Option<Verdict>,
}

/// Snapshot of a live session's current verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: AgentLabel,
    pub margin: f64,
    pub symbols: usize,
    #[serde(rename = "final")]
    pub is_final: bool,
}

impl LiveSession {
    pub fn new(bank: &ClassifierBank, gamma: f64) -> Result<Self, DetectError> {
        if !(gamma >= 0.0) {
            return Err(DetectError::InvalidParameter(format!(
                "gamma must be >= 0, got {gamma}"
            )));
        }
        Ok(Self {
            cursor: StreamCursor::default(),
            state: SessionState::new(&bank.classes),
            start: None,
            gamma,
            fired: None,
        })
    }

    /// Feeds one record in timestamp order; returns the symbols it produced.
    pub fn push(&mut self, bank: &ClassifierBank, record: &EventRecord) -> Result<usize, DetectError> {
        let start = *self.start.get_or_insert(record.timestamp);
        let elapsed = record.timestamp.saturating_sub(start);
        let symbols = self.cursor.push(&bank.pipeline, record)?;
        for &s in &symbols {
            self.state.update(&bank.classes, s, elapsed)?;
            if self.fired.is_none() {
                let v = self.current(bank)?;
                if v.margin > self.gamma {
                    self.fired = Some(Verdict { is_final: true, ..v });
                }
            }
        }
        Ok(symbols.len())
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    fn current(&self, bank: &ClassifierBank) -> Result<Verdict, DetectError> {
        Ok(Verdict {
            label: bank.classes[self.state.argmax()?].label.clone(),
            margin: self.state.margin()?,
            symbols: self.state.symbols_seen,
            is_final: false,
        })
    }

    /// The latched decision if the margin rule has fired, else the running argmax.
    pub fn verdict(&self, bank: &ClassifierBank) -> Result<Verdict, DetectError> {
        match &self.fired {
            Some(v) => Ok(v.clone()),
            None => self.current(bank),
        }
    }
}

/// Training settings for a detection bank.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BankConfig {
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::DETECTION,
            train: TrainConfig {
                num_states: 8,
                init: InitScheme::Empirical,
                stickiness: 0.5,
                ..TrainConfig::default()
            },
        }
    }
}

/// One row of an accuracy versus time-to-detection table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub rule: RuleKind,
    pub parameter: f64,
    pub traces: usize,
    pub accuracy: f64,
    pub timeouts: usize,
    pub mean_stop_symbols: f64,
    pub median_stop_symbols: f64,
    pub mean_stop_ms: f64,
    pub median_stop_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DetectError> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// The row with the smallest median stop time (ms) among rows at or above `accuracy`.
    pub fn fastest_reaching(&self, accuracy: f64) -> Option<&EvalRow> {
        self.rows
            .iter()
            .filter(|r| r.accuracy >= accuracy)
            .min_by(|a, b| a.median_stop_ms.total_cmp(&b.median_stop_ms))
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Runs each rule over every labeled test stream and tabulates accuracy and
/// stopping times.
pub fn evaluate_detector(
    bank: &ClassifierBank,
    test: &[(AgentLabel, ProcessedTrace)],
    rules: &[StopRule],
) -> Result<EvalTable, DetectError> {
    let mut rows = Vec::with_capacity(rules.len());
    for &rule in rules {
        let decisions = test
            .par_iter()
            .map(|(_, p)| bank.classify(p, rule))
            .collect::<Result<Vec<_>, _>>()?;
        let correct = decisions.iter().zip(test).filter(|(d, (l, _))| &d.label == l).count();
        let mut symbols: Vec<f64> = decisions.iter().map(|d| d.stop_symbol_index as f64).collect();
        let mut ms: Vec<f64> = decisions.iter().map(|d| d.stop_time as f64).collect();
        rows.push(EvalRow {
            rule: rule.kind(),
            parameter: rule.parameter(),
            traces: test.len(),
            accuracy: if test.is_empty() {
                0.0
            } else {
                correct as f64 / test.len() as f64
            },
            timeouts: decisions.iter().filter(|d| d.timeout).count(),
            mean_stop_symbols: mean(&symbols),
            median_stop_symbols: median(&mut symbols),
            mean_stop_ms: mean(&ms),
            median_stop_ms: median(&mut ms),
        });
    }
    Ok(EvalTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::tests::{iid, random_hmm};
    use proptest::prelude::*;

    fn two_coin_bank() -> Vec<BankClass> {
        vec![
            BankClass {
                label: AgentLabel::Human,
                model: iid(&[0.9, 0.1]),
            },
            BankClass {
                label: AgentLabel::Scanner,
                model: iid(&[0.1, 0.9]),
            },
        ]
    }

    fn untimed(symbols: &[u32]) -> impl Iterator<Item = (u32, u64)> + '_ {
        symbols.iter().enumerate().map(|(k, &s)| (s, k as u64 * 10))
    }

    #[test]
    fn margin_examples() {
        assert_eq!(top_two_gap(&[-5.0, -9.0]), 4.0);
        assert_eq!(top_two_gap(&[-3.0, -3.0, -7.0]), 0.0);
        assert_eq!(top_two_gap(&[-12.0, -3.0, -7.5]), 4.5);
        assert_eq!(top_two_gap(&[-5.0 + 100.0, -9.0 + 100.0]), 4.0);
        let s = SessionState::new(&two_coin_bank());
        assert!(matches!(s.margin(), Err(DetectError::NoSymbols)));
    }

    #[test]
    fn margin_stops_where_closed_form_says() {
        let bank = two_coin_bank();
        let zeros = [0u32; 10];
        // each zero adds ln 9 to the gap: ln 9 ~ 2.197 < 4 < 2 ln 9
        let d = classify_margin(&bank, untimed(&zeros), 4.0).unwrap();
        assert_eq!(d.stop_symbol_index, 2);
        assert_eq!(d.label, AgentLabel::Human);
        assert!((d.margin - 2.0 * 9f64.ln()).abs() < 1e-12);
        assert_eq!(d.stop_time, 10);
        assert!(!d.timeout);

        // gap cancels on 0,1 pairs and the first decisive symbol wins at gamma 0
        let d = classify_margin(&bank, untimed(&[1, 0, 1]), 0.0).unwrap();
        assert_eq!((d.stop_symbol_index, d.label), (1, AgentLabel::Scanner));

        let d = classify_margin(&bank, untimed(&[0, 1, 0, 1, 0]), 3.0).unwrap();
        assert!(d.timeout);
        assert_eq!(d.stop_symbol_index, 5);
        assert_eq!(d.label, AgentLabel::Human);

        assert!(matches!(
            classify_margin(&bank, untimed(&[]), 1.0),
            Err(DetectError::EmptyStream)
        ));
        assert!(matches!(
            classify_margin(&bank, untimed(&[0]), -1.0),
            Err(DetectError::InvalidParameter(_))
        ));
        assert!(matches!(
            classify_margin(&bank, untimed(&[2]), 1.0),
            Err(DetectError::Hmm(_))
        ));
        assert!(matches!(
            classify_margin(&bank[..1], untimed(&[0]), 1.0),
            Err(DetectError::TooFewClasses(1))
        ));
    }

    #[test]
    fn repeat_counter_resets() {
        let mut c = RepeatCounter::default();
        let runs: Vec<usize> = [0, 0, 1, 1, 1].iter().map(|&l| c.observe(l)).collect();
        assert_eq!(runs, vec![1, 2, 1, 2, 3]);
    }

    #[test]
    fn repeat_rule_examples() {
        let bank = two_coin_bank();
        let d = classify_repeat(&bank, untimed(&[1, 0, 0]), 1).unwrap();
        assert_eq!(
            (d.stop_symbol_index, d.label.clone(), d.margin),
            (1, AgentLabel::Scanner, 1.0)
        );
        // per-symbol log-ratios are +ln 1.5 for a 0 and -ln 4 for a 1,
        // so the predictions run H, H, S, S, S
        let skewed = vec![
            bank[0].clone(),
            BankClass {
                label: AgentLabel::Scanner,
                model: iid(&[0.6, 0.4]),
            },
        ];
        let stream = [0u32, 0, 1, 1, 1, 1];
        let d = classify_repeat(&skewed, untimed(&stream), 3).unwrap();
        assert_eq!((d.stop_symbol_index, d.label), (5, AgentLabel::Scanner));
        assert!(matches!(
            classify_repeat(&bank, untimed(&[0]), 0),
            Err(DetectError::InvalidParameter(_))
        ));
        let d = classify_repeat(&bank, untimed(&[0, 1]), 5).unwrap();
        assert!(d.timeout);
    }

    fn random_bank(seed: u64, classes: usize, s: usize, a: usize) -> Vec<BankClass> {
        let labels = [
            AgentLabel::Human,
            AgentLabel::Scanner,
            AgentLabel::Crawler,
            AgentLabel::UiFuzzer,
        ];
        (0..classes)
            .map(|j| BankClass {
                label: labels[j].clone(),
                model: random_hmm(seed * 31 + j as u64, s, a),
            })
            .collect()
    }

    #[test]
    fn incremental_matches_batch() {
        let bank = random_bank(5, 3, 3, 6);
        let stream = bank[1].model.sample(2000, 17);
        let mut st = SessionState::new(&bank);
        for (k, &x) in stream.iter().enumerate() {
            st.update(&bank, x, k as u64).unwrap();
            if k % 97 == 0 || k + 1 == stream.len() {
                for (c, l) in bank.iter().zip(st.log_likelihoods()) {
                    let batch = c.model.forward_log_likelihood(&stream[..=k]).unwrap();
                    assert!((l - batch).abs() < 1e-10);
                }
            }
        }
        assert_eq!(st.symbols_seen(), 2000);
    }

    #[test]
    fn log_likelihood_non_increasing() {
        let bank = random_bank(9, 2, 2, 4);
        let mut st = SessionState::new(&bank);
        let mut prev = vec![0.0; 2];
        for &x in &bank[0].model.sample(300, 1) {
            st.update(&bank, x, 0).unwrap();
            let now = st.log_likelihoods();
            assert!(now.iter().zip(&prev).all(|(n, p)| n <= p));
            prev = now;
        }
    }

    #[test]
    fn accuracy_grows_with_gamma() {
        let bank = random_bank(2, 3, 2, 5);
        let mut acc = Vec::new();
        for gamma in [2.0, 5.0, 10.0] {
            let mut correct = 0;
            for trial in 0..200u64 {
                let j = (trial % 3) as usize;
                let stream = bank[j].model.sample(3000, trial);
                let d = classify_margin(&bank, untimed(&stream), gamma).unwrap();
                correct += (d.label == bank[j].label) as usize;
            }
            acc.push(correct as f64 / 200.0);
        }
        // allow two binomial standard errors of slack between neighbours
        assert!(acc[1] >= acc[0] - 0.05 && acc[2] >= acc[1] - 0.05, "{acc:?}");
        assert!(acc[2] >= 0.95, "{acc:?}");
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    proptest! {
        #[test]
        fn stop_index_monotone_in_gamma(seed in 0u64..500, g1 in 0.0f64..15.0, g2 in 0.0f64..15.0) {
            let bank = random_bank(seed, 3, 2, 4);
            let stream = bank[(seed % 3) as usize].model.sample(400, seed);
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let a = classify_margin(&bank, untimed(&stream), lo).unwrap();
            let b = classify_margin(&bank, untimed(&stream), hi).unwrap();
            prop_assert!(a.stop_symbol_index <= b.stop_symbol_index);
            if !b.timeout {
                // soundness: the winner leads every other class by more than gamma
                let mut st = SessionState::new(&bank);
                for &x in &stream[..b.stop_symbol_index] {
                    st.update(&bank, x, 0).unwrap();
                }
                let ll = st.log_likelihoods();
                let w = bank.iter().position(|c| c.label == b.label).unwrap();
                for (i, l) in ll.iter().enumerate() {
                    if i != w {
                        prop_assert!(ll[w] - l > hi);
                    }
                }
            }
        }

        #[test]
        fn stop_index_monotone_in_q(seed in 0u64..500, q1 in 1usize..40, q2 in 1usize..40) {
            let bank = random_bank(seed, 2, 2, 3);
            let stream = bank[0].model.sample(200, seed);
            let (lo, hi) = (q1.min(q2), q1.max(q2));
            let a = classify_repeat(&bank, untimed(&stream), lo).unwrap();
            let b = classify_repeat(&bank, untimed(&stream), hi).unwrap();
            prop_assert!(a.stop_symbol_index <= b.stop_symbol_index);
        }

        #[test]
        fn deterministic(seed in 0u64..200) {
            let bank = random_bank(seed, 2, 2, 3);
            let stream = bank[1].model.sample(100, seed);
            let a = classify_margin(&bank, untimed(&stream), 3.0).unwrap();
            let b = classify_margin(&bank, untimed(&stream), 3.0).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
