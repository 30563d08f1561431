//! Command implementations. Machine-readable results go to files; `out`
//! receives a short human summary.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use webguard_client::{Client, ReplayOptions, ReplayReport};
use webguard_core::cluster::{attribute, clustering_metrics, ClusterResult, ClusteringMetrics};
use webguard_core::detect::{evaluate_detector, fit_bank, ClassifierBank, Decision, EvalTable};
use webguard_core::divergence::DivMatrix;
use webguard_core::ingest::{
    batch_trace, export_sessions, measure_overhead, transcript, OverheadReport, SessionStore, TransportMode,
};
use webguard_core::preprocess::Pipeline;
use webguard_core::rng;
use webguard_core::simulate::generate_corpus;
use webguard_core::theory::{
    empirical_exponent_ratio, kl, sampled_exponent, subset_average_first_term, ExponentTable, FiniteDist,
};
use webguard_core::trace::{
    apply_labels, parse_trace_file, read_labels, serialize_trace_file, write_labels, AgentLabel, Trace,
};

use crate::config::{parse_classes, RunConfig};
use crate::{CliError, Command, InputArgs, Preset};

type Out<'a> = &'a mut dyn Write;

fn say(out: Out, text: impl std::fmt::Display) -> Result<(), CliError> {
    writeln!(out, "{text}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Domain(e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

/// Loads traces from a file or a corpus directory and attaches labels.
pub fn read_traces(input: &InputArgs) -> Result<Vec<Trace>, CliError> {
    let (file, mut labels) = if input.input.is_dir() {
        let sidecar = input.input.join("labels.csv");
        (input.input.join("traces.jsonl"), sidecar.exists().then_some(sidecar))
    } else {
        (input.input.clone(), None)
    };
    if input.labels.is_some() {
        labels = input.labels.clone();
    }
    let mut traces = parse_trace_file(open(&file)?)?;
    if let Some(path) = labels {
        apply_labels(&mut traces, &read_labels(open(&path)?)?);
    }
    Ok(traces)
}

fn keep_events(traces: Vec<Trace>, filter: Option<&[u8]>) -> Vec<Trace> {
    match filter {
        None => traces,
        Some(keep) => traces
            .iter()
            .filter_map(|t| t.filter(|r| keep.contains(&r.event_index)))
            .collect(),
    }
}

fn labels_of(traces: &[Trace]) -> Result<Vec<AgentLabel>, CliError> {
    traces
        .iter()
        .map(|t| {
            t.label
                .clone()
                .ok_or_else(|| CliError::Domain(format!("trace {} has no label", t.session_id())))
        })
        .collect()
}

/// Traces grouped by label in first-seen order.
pub fn group_by_label(traces: Vec<Trace>) -> Result<Vec<(AgentLabel, Vec<Trace>)>, CliError> {
    let labels = labels_of(&traces)?;
    let mut groups: Vec<(AgentLabel, Vec<Trace>)> = Vec::new();
    for (t, l) in traces.into_iter().zip(labels) {
        match groups.iter_mut().find(|(g, _)| *g == l) {
            Some((_, ts)) => ts.push(t),
            None => groups.push((l, vec![t])),
        }
    }
    Ok(groups)
}

fn read_bank(path: &Path) -> Result<ClassifierBank, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(ClassifierBank::from_json(&text)?)
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Runtime::new().map_err(|e| CliError::io(Path::new("<runtime>"), e))
}

pub fn dispatch(command: &Command, cfg: &RunConfig, out: Out) -> Result<(), CliError> {
    match command {
        Command::Simulate(a) => simulate(cfg, &a.out, out),
        Command::Preprocess(a) => preprocess(cfg, &a.input, a.preset, &a.out, out),
        Command::TrainBank(a) => train_bank(cfg, &a.input, &a.out, out),
        Command::Cluster(a) => cluster(cfg, &a.input, &a.out, out),
        Command::Classify(a) => classify(cfg, &a.bank, &a.input, a.out.as_deref(), out),
        Command::Evaluate(a) => evaluate(cfg, &a.bank, &a.input, &a.out, out),
        Command::Serve(_) => serve(cfg, out),
        Command::OverheadBench(a) => {
            let report = runtime()?.block_on(overhead_bench(cfg))?;
            if let Some(path) = &a.out {
                write_json(path, &report)?;
            }
            say(out, report.summary())
        }
        Command::LemmaCheck(a) => lemma_check(cfg, a.out.as_deref(), a.report.as_deref(), out),
        Command::Replay(a) => replay(cfg, &a.target, &a.input, a.out.as_deref(), out),
    }
}

pub fn simulate(cfg: &RunConfig, dir: &Path, out: Out) -> Result<(), CliError> {
    let gens = parse_classes(&cfg.simulate.classes)?;
    let corpus = generate_corpus(
        &gens,
        cfg.simulate.per_class,
        cfg.seed,
        &cfg.simulate.template,
        cfg.simulate.min_events,
    )?;
    let traces_path = dir.join("traces.jsonl");
    let mut w = create(&traces_path)?;
    serialize_trace_file(&corpus, &mut w)?;
    w.flush().map_err(|e| CliError::io(&traces_path, e))?;
    write_labels(&corpus, create(&dir.join("labels.csv"))?)?;
    let events: usize = corpus.iter().map(Trace::len).sum();
    say(
        out,
        format!(
            "wrote {} traces ({} classes, {events} events) to {}",
            corpus.len(),
            gens.len(),
            dir.display()
        ),
    )
}

#[derive(Serialize)]
struct SymbolLine<'a> {
    sid: &'a str,
    alphabet: usize,
    symbols: &'a [u32],
}

pub fn preprocess(cfg: &RunConfig, input: &InputArgs, preset: Preset, path: &Path, out: Out) -> Result<(), CliError> {
    let traces = read_traces(input)?;
    let config = match preset {
        Preset::Clustering => cfg.attribute.preprocess,
        Preset::Detection => cfg.bank.preprocess,
    };
    let pipeline = Pipeline::fit(&traces, config)?;
    let mut w = create(path)?;
    let mut total = 0;
    for t in &traces {
        let p = pipeline.process(t)?;
        total += p.symbols.len();
        let line = SymbolLine {
            sid: t.session_id(),
            alphabet: p.alphabet_size,
            symbols: &p.symbols,
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| CliError::Domain(e.to_string()))?;
        writeln!(w).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    say(
        out,
        format!(
            "{} traces -> {total} symbols over an alphabet of {}",
            traces.len(),
            pipeline.alphabet_size()
        ),
    )
}

pub fn train_bank(cfg: &RunConfig, input: &InputArgs, path: &Path, out: Out) -> Result<(), CliError> {
    let filter = cfg.detect.event_filter()?;
    let traces = keep_events(read_traces(input)?, filter.as_deref());
    let groups = group_by_label(traces)?;
    let bank = fit_bank(&groups, &cfg.bank.train, cfg.bank.preprocess)?;
    let mut w = create(path)?;
    w.write_all(bank.to_json()?.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))?;
    let classes: Vec<String> = groups.iter().map(|(l, ts)| format!("{l} ({})", ts.len())).collect();
    say(
        out,
        format!("bank with {} classes: {}", groups.len(), classes.join(", ")),
    )
}

#[derive(Serialize)]
pub struct ClusterReport {
    pub n: usize,
    pub k: usize,
    pub metrics: Option<ClusteringMetrics>,
    pub result: ClusterResult,
    pub divergence: DivMatrix,
}

/// Runs attribution and returns the report written by `cluster`.
pub fn cluster_traces(cfg: &RunConfig, traces: &[Trace]) -> Result<ClusterReport, CliError> {
    let a = attribute(traces, &cfg.attribute)?;
    let metrics = match labels_of(traces) {
        Ok(labels) => {
            let mut ids: BTreeMap<&AgentLabel, usize> = BTreeMap::new();
            for l in &labels {
                let next = ids.len();
                ids.entry(l).or_insert(next);
            }
            let truth: Vec<usize> = labels.iter().map(|l| ids[l]).collect();
            Some(clustering_metrics(&a.result.labels, &truth)?)
        }
        Err(_) => None,
    };
    Ok(ClusterReport {
        n: traces.len(),
        k: cfg.attribute.cluster.k,
        metrics,
        result: a.result,
        divergence: a.divergence,
    })
}

pub fn cluster(cfg: &RunConfig, input: &InputArgs, dir: &Path, out: Out) -> Result<(), CliError> {
    let traces = read_traces(input)?;
    let report = cluster_traces(cfg, &traces)?;
    let path = dir.join("assignments.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let io = |e: csv::Error| CliError::Domain(e.to_string());
    w.write_record(["sid", "cluster", "label"]).map_err(io)?;
    for (t, c) in traces.iter().zip(&report.result.labels) {
        let label = t.label.as_ref().map(ToString::to_string).unwrap_or_default();
        w.write_record([t.session_id(), &c.to_string(), &label]).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    write_json(&dir.join("metrics.json"), &report)?;
    match report.metrics {
        Some(m) => say(
            out,
            format!(
                "{} traces into {} clusters: ARI {:.4}, AMI {:.4}, V {:.4}",
                report.n, report.k, m.ari, m.ami, m.v_measure
            ),
        ),
        None => say(out, format!("{} traces into {} clusters", report.n, report.k)),
    }
}

#[derive(Serialize)]
struct DecisionLine<'a> {
    sid: &'a str,
    #[serde(flatten)]
    decision: &'a Decision,
}

pub fn classify(
    cfg: &RunConfig,
    bank: &Path,
    input: &InputArgs,
    path: Option<&Path>,
    out: Out,
) -> Result<(), CliError> {
    let bank = read_bank(bank)?;
    let filter = cfg.detect.event_filter()?;
    let traces = keep_events(read_traces(input)?, filter.as_deref());
    let rule = cfg.detect.rule();
    let mut lines = Vec::with_capacity(traces.len());
    for t in &traces {
        let decision = bank.classify(&bank.process(t)?, rule)?;
        let line = DecisionLine {
            sid: t.session_id(),
            decision: &decision,
        };
        lines.push(serde_json::to_string(&line).map_err(|e| CliError::Domain(e.to_string()))?);
    }
    match path {
        Some(p) => {
            let mut w = create(p)?;
            for l in &lines {
                writeln!(w, "{l}").map_err(|e| CliError::io(p, e))?;
            }
            w.flush().map_err(|e| CliError::io(p, e))?;
            say(out, format!("classified {} traces", lines.len()))
        }
        None => lines.iter().try_for_each(|l| say(out, l)),
    }
}

/// Evaluates `bank` on labeled traces over the configured grid.
pub fn evaluate_traces(cfg: &RunConfig, bank: &ClassifierBank, traces: Vec<Trace>) -> Result<EvalTable, CliError> {
    let filter = cfg.detect.event_filter()?;
    let traces = keep_events(traces, filter.as_deref());
    let labels = labels_of(&traces)?;
    let test = traces
        .iter()
        .zip(labels)
        .map(|(t, l)| Ok((l, bank.process(t)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(evaluate_detector(bank, &test, &cfg.detect.grid())?)
}

pub fn evaluate(cfg: &RunConfig, bank: &Path, input: &InputArgs, path: &Path, out: Out) -> Result<(), CliError> {
    let bank = read_bank(bank)?;
    let table = evaluate_traces(cfg, &bank, read_traces(input)?)?;
    table.write_csv(create(path)?)?;
    for r in &table.rows {
        say(
            out,
            format!(
                "{:?} {:>6}: accuracy {:.3}, median stop {} symbols / {} ms, {} timeouts",
                r.rule, r.parameter, r.accuracy, r.median_stop_symbols, r.median_stop_ms, r.timeouts
            ),
        )?;
    }
    Ok(())
}

pub fn serve(cfg: &RunConfig, out: Out) -> Result<(), CliError> {
    let store = match &cfg.serve.bank {
        Some(path) => SessionStore::with_detection(read_bank(path)?, cfg.detect.gamma)?,
        None => SessionStore::new(),
    };
    let rt = runtime()?;
    let store = rt.block_on(async {
        let handle = webguard_server::serve(&cfg.serve.bind, store).await?;
        say(out, format!("listening on {}", handle.url()))?;
        out.flush().ok();
        tokio::signal::ctrl_c()
            .await
            .map_err(|e| CliError::io(Path::new("<signal>"), e))?;
        tracing::info!("shutting down");
        Ok::<_, CliError>(handle.shutdown().await?)
    })?;
    if let Some(dir) = &cfg.serve.store {
        let path = dir.join("sessions.jsonl");
        let mut w = create(&path)?;
        export_sessions(&store, &mut w)?;
        w.flush().map_err(|e| CliError::io(&path, e))?;
        say(
            out,
            format!("exported {} sessions to {}", store.session_ids().len(), path.display()),
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct OverheadBench {
    pub session_id: String,
    pub events: usize,
    pub duration_ms: u64,
    pub batches: usize,
    pub mean_payload: f64,
    /// Expected WebSocket bytes under standard client framing.
    pub websocket: OverheadReport,
    /// What the service received over WebSocket.
    pub websocket_observed: OverheadReport,
    /// HTTP with the configured header profile on every request.
    pub http: OverheadReport,
    /// What the service received over HTTP; request headers only.
    pub http_observed: OverheadReport,
    pub framing_per_message: f64,
    /// Framing bytes if every message carried an 8-byte header.
    pub eight_byte_header_framing: usize,
    pub reduction: f64,
    pub reduction_observed_headers: f64,
    /// The services saw exactly the messages, payload and framing bytes expected.
    pub consistent: bool,
}

impl OverheadBench {
    pub fn summary(&self) -> String {
        format!(
            "{} events in {} batches: WebSocket framing {:.2} B/message ({} B total), HTTP headers {} B; {:.2}% less recurrent overhead",
            self.events,
            self.batches,
            self.framing_per_message,
            self.websocket.framing_bytes,
            self.http.header_bytes,
            100.0 * self.reduction
        )
    }
}

/// Replays one generated trace over each transport against a fresh
/// in-process service and compares the byte accounts.
pub async fn overhead_bench(cfg: &RunConfig) -> Result<OverheadBench, CliError> {
    let oc = &cfg.overhead;
    let trace = oc.generator.generate(&oc.sim)?;
    let mut observed = Vec::with_capacity(2);
    for transport in [TransportMode::Websocket, TransportMode::Http] {
        let server = webguard_server::serve("127.0.0.1:0", SessionStore::new()).await?;
        let opts = ReplayOptions {
            transport,
            policy: oc.policy,
            time_scale: 0.0,
        };
        Client::new(&server.url())?.replay(&trace, &opts).await?;
        observed.push(server.tap.report(transport));
        server.shutdown().await?;
    }
    let (websocket_observed, http_observed) = (observed[0], observed[1]);

    let batches = batch_trace(&trace, oc.policy);
    let websocket = measure_overhead(
        &transcript(&batches, TransportMode::Websocket, oc.headers),
        TransportMode::Websocket,
    );
    let http = measure_overhead(
        &transcript(&batches, TransportMode::Http, oc.headers),
        TransportMode::Http,
    );
    let wire = |r: &OverheadReport| (r.messages, r.payload_bytes, r.framing_bytes);
    let consistent = wire(&websocket_observed) == wire(&websocket)
        && (http_observed.messages, http_observed.payload_bytes) == (http.messages, http.payload_bytes);
    Ok(OverheadBench {
        session_id: trace.session_id().to_string(),
        events: trace.len(),
        duration_ms: trace.duration_ms(),
        batches: batches.len(),
        mean_payload: websocket.payload_bytes as f64 / batches.len() as f64,
        framing_per_message: websocket.framing_per_message(),
        eight_byte_header_framing: 8 * batches.len(),
        reduction: websocket.reduction_versus(&http),
        reduction_observed_headers: websocket.reduction_versus(&http_observed),
        websocket,
        websocket_observed,
        http,
        http_observed,
        consistent,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LemmaReport {
    pub identity_pairs: usize,
    pub identity_max_error: f64,
    pub table: ExponentTable,
    pub full_relative_error: f64,
    pub sampled_relative_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Largest deviation of the subset-average first term from `|Y|/|X| * KL`
/// over random pairs.
pub fn identity_max_error(cfg: &RunConfig) -> Result<f64, CliError> {
    let lc = &cfg.lemma;
    let mut rng = rng::derived(cfg.seed, &[6]);
    let mut worst: f64 = 0.0;
    for _ in 0..lc.identity_pairs {
        let p = FiniteDist::random(&mut rng, lc.identity_alphabet);
        let q = FiniteDist::random(&mut rng, lc.identity_alphabet);
        let lhs = subset_average_first_term(&p, &q, lc.identity_subset)?;
        let rhs = lc.identity_subset as f64 / lc.identity_alphabet as f64 * kl(&p, &q)?;
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

pub fn lemma_report(cfg: &RunConfig) -> Result<LemmaReport, CliError> {
    let lc = &cfg.lemma;
    let identity_max_error = identity_max_error(cfg)?;
    let table = empirical_exponent_ratio(&lc.p, &lc.q, &lc.subset, &lc.exponent)?;
    let full_relative_error = (table.full_slope - table.kl).abs() / table.kl;
    let sampled_relative_error = (table.sampled_slope - table.sampled_exponent).abs() / table.sampled_exponent;
    debug_assert_eq!(table.sampled_exponent, sampled_exponent(&lc.p, &lc.q, &lc.subset)?);
    let pass =
        identity_max_error <= 1e-12 && full_relative_error <= lc.tolerance && sampled_relative_error <= lc.tolerance;
    Ok(LemmaReport {
        identity_pairs: lc.identity_pairs,
        identity_max_error,
        table,
        full_relative_error,
        sampled_relative_error,
        tolerance: lc.tolerance,
        pass,
    })
}

pub fn lemma_check(
    cfg: &RunConfig,
    csv_path: Option<&Path>,
    json_path: Option<&Path>,
    out: Out,
) -> Result<(), CliError> {
    let report = lemma_report(cfg)?;
    if let Some(path) = csv_path {
        let mut w = csv::Writer::from_writer(create(path)?);
        for row in &report.table.rows {
            w.serialize(row).map_err(|e| CliError::Domain(e.to_string()))?;
        }
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    if let Some(path) = json_path {
        write_json(path, &report)?;
    }
    let t = &report.table;
    say(
        out,
        format!(
            "identity: max error {:.2e} over {} pairs\nfull test: slope {:.5} vs KL {:.5} ({:.1}% off)\nsampled test: slope {:.5} vs exponent {:.5} ({:.1}% off)",
            report.identity_max_error,
            report.identity_pairs,
            t.full_slope,
            t.kl,
            100.0 * report.full_relative_error,
            t.sampled_slope,
            t.sampled_exponent,
            100.0 * report.sampled_relative_error
        ),
    )?;
    if report.pass {
        say(out, "PASS")
    } else {
        say(out, "FAIL")?;
        Err(CliError::Domain(format!(
            "lemma check outside tolerance {} (identity {:.2e}, full {:.3}, sampled {:.3})",
            report.tolerance, report.identity_max_error, report.full_relative_error, report.sampled_relative_error
        )))
    }
}

pub fn replay(cfg: &RunConfig, target: &str, input: &InputArgs, path: Option<&Path>, out: Out) -> Result<(), CliError> {
    let traces = read_traces(input)?;
    let client = Client::new(target)?;
    let reports: Vec<ReplayReport> = runtime()?.block_on(async {
        let mut reports = Vec::with_capacity(traces.len());
        for t in &traces {
            reports.push(client.replay(t, &cfg.replay).await?);
        }
        Ok::<_, CliError>(reports)
    })?;
    if let Some(p) = path {
        let mut w = create(p)?;
        for r in &reports {
            serde_json::to_writer(&mut w, r).map_err(|e| CliError::Domain(e.to_string()))?;
            writeln!(w).map_err(|e| CliError::io(p, e))?;
        }
        w.flush().map_err(|e| CliError::io(p, e))?;
    }
    let events: usize = reports.iter().map(|r| r.events).sum();
    let batches: usize = reports.iter().map(|r| r.batches).sum();
    say(
        out,
        format!(
            "replayed {} traces: {events} events in {batches} batches",
            reports.len()
        ),
    )
}
