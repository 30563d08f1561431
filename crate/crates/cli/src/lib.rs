//! The `webguard` command line: corpus simulation, preprocessing, offline
//! attribution, detection banks, the ingestion service and the overhead and
//! lemma benches.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;
use webguard_core::cluster::{ClusterMethod, FitStrategy};
use webguard_core::detect::RuleKind;
use webguard_core::ingest::TransportMode;
use webguard_core::simulate::Generator;

pub mod commands;
pub mod config;

pub use config::{RunConfig, SEED_ENV};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("network: {0}")]
    Network(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Network(_) => 3,
            CliError::Domain(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Network(_) => "network",
            CliError::Domain(_) => "domain",
        }
    }

    /// The structured form printed on standard error.
    pub fn to_json(&self) -> String {
        serde_json::json!({"error": {"kind": self.kind(), "code": self.exit_code(), "message": self.to_string()}})
            .to_string()
    }
}

macro_rules! domain_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Domain(e.to_string())
            }
        }
    )*};
}

domain_errors!(
    webguard_core::trace::TraceError,
    webguard_core::preprocess::PreprocessError,
    webguard_core::hmm::HmmError,
    webguard_core::cluster::ClusterError,
    webguard_core::detect::DetectError,
    webguard_core::simulate::SimError,
    webguard_core::ingest::IngestError,
    webguard_core::theory::TheoryError
);

impl From<webguard_client::ClientError> for CliError {
    fn from(e: webguard_client::ClientError) -> Self {
        use webguard_client::ClientError as E;
        match e {
            E::Http(_) | E::WebSocket(_) => CliError::Network(e.to_string()),
            other => CliError::Domain(other.to_string()),
        }
    }
}

impl From<webguard_server::ServerError> for CliError {
    fn from(e: webguard_server::ServerError) -> Self {
        CliError::Network(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "webguard", version, about = "Behavioral forensics for browser event traces")]
pub struct Cli {
    /// JSON file with configuration overrides.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; every module seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic corpus.
    Simulate(SimulateArgs),
    /// Turn traces into symbol streams.
    Preprocess(PreprocessArgs),
    /// Fit one HMM per labeled class.
    TrainBank(TrainBankArgs),
    /// Cluster unlabeled traces by model divergence.
    Cluster(ClusterArgs),
    /// Classify traces with a trained bank.
    Classify(ClassifyArgs),
    /// Accuracy and stopping time of a bank over a stopping-rule grid.
    Evaluate(EvaluateArgs),
    /// Run the ingestion service until interrupted.
    Serve(ServeArgs),
    /// Compare WebSocket and HTTP transport bytes for one replayed trace.
    OverheadBench(OverheadArgs),
    /// Check the subsampling error-exponent formulas.
    LemmaCheck(LemmaArgs),
    /// Stream traces to a running service.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Trace file, or a corpus directory holding traces.jsonl and labels.csv.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Label sidecar (`sid,label`).
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// `all`, `extended` or a comma-separated list of generators.
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Seconds per trace.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub min_events: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Clustering,
    Detection,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value = "clustering")]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainBankArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Hidden states per class model.
    #[arg(long)]
    pub states: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Keep only these events (comma-separated catalog names).
    #[arg(long, value_delimiter = ',')]
    pub events: Option<Vec<String>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Spectral,
    Agglomerative,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FitArg {
    Shared,
    Independent,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub k: Option<usize>,
    /// Hidden states per trace model.
    #[arg(long)]
    pub s: Option<usize>,
    /// Block length of the compared laws.
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, value_enum)]
    pub fit: Option<FitArg>,
    /// Output directory for assignments.csv and metrics.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RuleArg {
    Margin,
    Repeat,
}

#[derive(Debug, Args)]
pub struct RuleArgs {
    #[arg(long, value_enum)]
    pub rule: Option<RuleArg>,
    /// Margin threshold in nats.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Run length for the repeat rule.
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub events: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub rule: RuleArgs,
    /// Decision lines go here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub rule: RuleArgs,
    /// Thresholds to sweep (gamma for margin, q for repeat).
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// CSV table destination.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Directory the sessions are exported to on shutdown.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Margin threshold for live verdicts.
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct OverheadArgs {
    #[arg(long, value_parser = parse_generator)]
    pub generator: Option<Generator>,
    /// Events per second.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub duration: Option<f64>,
    /// JSON report destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LemmaArgs {
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub n_grid: Option<Vec<usize>>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// CSV table destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON summary destination.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TransportArg {
    Websocket,
    Http,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Service root, e.g. http://127.0.0.1:8080.
    #[arg(long)]
    pub target: String,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum)]
    pub transport: Option<TransportArg>,
    /// Wall seconds per trace second; 0 sends as fast as possible.
    #[arg(long)]
    pub time_scale: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_generator(s: &str) -> Result<Generator, String> {
    s.parse().map_err(|e: webguard_core::simulate::SimError| e.to_string())
}

fn apply_rule(cfg: &mut RunConfig, r: &RuleArgs) {
    if let Some(rule) = r.rule {
        cfg.detect.rule = match rule {
            RuleArg::Margin => RuleKind::Margin,
            RuleArg::Repeat => RuleKind::Repeat,
        };
    }
    set(&mut cfg.detect.gamma, r.gamma);
    set(&mut cfg.detect.repeat, r.q);
    if r.events.is_some() {
        cfg.detect.events = r.events.clone();
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Applies the command's flags on top of `cfg`.
pub fn apply_flags(cfg: &mut RunConfig, cli: &Cli) {
    set(&mut cfg.seed, cli.seed);
    match &cli.command {
        Command::Simulate(a) => {
            set(&mut cfg.simulate.classes, a.classes.clone());
            set(&mut cfg.simulate.per_class, a.per_class);
            set(&mut cfg.simulate.template.duration, a.duration);
            set(&mut cfg.simulate.min_events, a.min_events);
        }
        Command::Preprocess(_) => {}
        Command::TrainBank(a) => {
            set(&mut cfg.bank.train.num_states, a.states);
            set(&mut cfg.bank.train.restarts, a.restarts);
            if a.events.is_some() {
                cfg.detect.events = a.events.clone();
            }
        }
        Command::Cluster(a) => {
            set(&mut cfg.attribute.cluster.k, a.k);
            set(&mut cfg.attribute.train.num_states, a.s);
            set(&mut cfg.attribute.divergence.t, a.t);
            set(&mut cfg.attribute.cluster.sigma, a.sigma);
            if let Some(m) = a.method {
                cfg.attribute.cluster.method = match m {
                    MethodArg::Spectral => ClusterMethod::Spectral,
                    MethodArg::Agglomerative => ClusterMethod::Agglomerative,
                };
            }
            match a.fit {
                Some(FitArg::Independent) => cfg.attribute.fit = FitStrategy::Independent,
                Some(FitArg::Shared) if !matches!(cfg.attribute.fit, FitStrategy::Shared { .. }) => {
                    cfg.attribute.fit = FitStrategy::default()
                }
                _ => {}
            }
        }
        Command::Classify(a) => apply_rule(cfg, &a.rule),
        Command::Evaluate(a) => {
            apply_rule(cfg, &a.rule);
            set(&mut cfg.detect.gamma_grid, a.grid.clone());
        }
        Command::Serve(a) => {
            set(&mut cfg.serve.bind, a.bind.clone());
            if a.bank.is_some() {
                cfg.serve.bank = a.bank.clone();
            }
            if a.store.is_some() {
                cfg.serve.store = a.store.clone();
            }
            set(&mut cfg.detect.gamma, a.gamma);
        }
        Command::OverheadBench(a) => {
            set(&mut cfg.overhead.generator, a.generator);
            set(&mut cfg.overhead.sim.rate, a.rate);
            set(&mut cfg.overhead.sim.duration, a.duration);
        }
        Command::LemmaCheck(a) => {
            set(&mut cfg.lemma.exponent.trials, a.trials);
            set(&mut cfg.lemma.exponent.n_grid, a.n_grid.clone());
            set(&mut cfg.lemma.tolerance, a.tolerance);
        }
        Command::Replay(a) => {
            if let Some(t) = a.transport {
                cfg.replay.transport = match t {
                    TransportArg::Websocket => TransportMode::Websocket,
                    TransportArg::Http => TransportMode::Http,
                };
            }
            set(&mut cfg.replay.time_scale, a.time_scale);
        }
    }
    cfg.propagate_seed();
}

/// Parses `args`, merges the configuration and runs the command. Human
/// summaries go to `out`.
pub fn run<I, T>(args: I, env_seed: Option<&str>, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            write!(out, "{}", e.render()).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string())),
    };
    let mut cfg = config::load(cli.config.as_deref(), env_seed)?;
    apply_flags(&mut cfg, &cli);
    if cli.dump_config {
        let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
        writeln!(out, "{text}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
        return Ok(());
    }
    commands::dispatch(&cli.command, &cfg, out)
}
