use proptest::prelude::*;
use webguard_core::detect::{fit_bank, ClassifierBank, StopRule};
use webguard_core::hmm::TrainConfig;
use webguard_core::ingest::{batch_trace, export_sessions, BatchPolicy, SessionStore};
use webguard_core::preprocess::{Pipeline, PreprocessConfig};
use webguard_core::simulate::{generate_corpus, Generator, SimConfig};
use webguard_core::trace::{apply_labels, parse_trace_file, read_labels, serialize_trace_file, write_labels, Trace};

fn corpus(seed: u64) -> Vec<Trace> {
    let template = SimConfig {
        duration: 3.0,
        ..SimConfig::default()
    };
    generate_corpus(
        &[Generator::Humanlike, Generator::Scanner, Generator::RandomNaive],
        3,
        seed,
        &template,
        0,
    )
    .unwrap()
}

#[test]
fn trace_files_and_labels_round_trip() {
    let traces = corpus(1);
    let mut file = Vec::new();
    serialize_trace_file(&traces, &mut file).unwrap();
    let mut labels = Vec::new();
    write_labels(&traces, &mut labels).unwrap();

    let mut back = parse_trace_file(file.as_slice()).unwrap();
    apply_labels(&mut back, &read_labels(labels.as_slice()).unwrap());
    assert_eq!(back, traces);
}

#[test]
fn interleaved_sessions_export_intact() {
    let traces = corpus(2);
    let store = SessionStore::new();
    let mut queues: Vec<_> = traces
        .iter()
        .map(|t| batch_trace(t, BatchPolicy::default()).into_iter())
        .collect();
    // round-robin across sessions, as concurrent clients would arrive
    loop {
        let mut sent = false;
        for q in &mut queues {
            if let Some(b) = q.next() {
                store.ingest(b).unwrap();
                sent = true;
            }
        }
        if !sent {
            break;
        }
    }
    let mut out = Vec::new();
    assert_eq!(export_sessions(&store, &mut out).unwrap(), out.len());
    let mut back = parse_trace_file(out.as_slice()).unwrap();
    back.sort_by(|a, b| a.session_id().cmp(b.session_id()));
    let mut want: Vec<Trace> = traces
        .into_iter()
        .map(|mut t| {
            t.label = None;
            t
        })
        .collect();
    want.sort_by(|a, b| a.session_id().cmp(b.session_id()));
    assert_eq!(back, want);
}

#[test]
fn streaming_symbols_equal_batch_symbols() {
    let traces = corpus(3);
    let pipeline = Pipeline::fit(&traces, PreprocessConfig::DETECTION).unwrap();
    for t in &traces {
        let mut s = pipeline.stream();
        let mut streamed = Vec::new();
        for r in t.records() {
            streamed.extend(s.push(r).unwrap());
        }
        assert_eq!(streamed, pipeline.process(t).unwrap().symbols, "{}", t.session_id());
    }
}

#[test]
fn bank_json_round_trip_preserves_decisions() {
    let traces = corpus(4);
    let mut groups: Vec<(_, Vec<Trace>)> = Vec::new();
    for t in &traces {
        let label = t.label.clone().unwrap();
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, ts)) => ts.push(t.clone()),
            None => groups.push((label, vec![t.clone()])),
        }
    }
    let train = TrainConfig {
        num_states: 3,
        restarts: 1,
        ..TrainConfig::default()
    };
    let bank = fit_bank(&groups, &train, PreprocessConfig::DETECTION).unwrap();
    let back = ClassifierBank::from_json(&bank.to_json().unwrap()).unwrap();
    for t in &traces {
        let rule = StopRule::Margin { gamma: 5.0 };
        let a = bank.classify(&bank.process(t).unwrap(), rule).unwrap();
        let b = back.classify(&back.process(t).unwrap(), rule).unwrap();
        assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batching_preserves_every_event(seed in 0u64..1000, max_events in 1usize..64, flush_ms in 1u64..500) {
        let config = SimConfig { duration: 2.0, seed, ..SimConfig::default() };
        let trace = Generator::UiFuzzer.generate(&config).unwrap();
        let policy = BatchPolicy { max_events, flush_ms };
        let batches = batch_trace(&trace, policy);
        let mut records = Vec::new();
        for (k, b) in batches.iter().enumerate() {
            prop_assert_eq!(b.seq, k as u64);
            prop_assert!(!b.ev.is_empty() && b.ev.len() <= max_events);
            records.extend(b.records().unwrap());
        }
        prop_assert_eq!(records.as_slice(), trace.records());
    }
}
