//! The merged run configuration: defaults, then `WEBGUARD_SEED`, then the
//! JSON config file, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use webguard_client::ReplayOptions;
use webguard_core::cluster::AttributeConfig;
use webguard_core::detect::{BankConfig, RuleKind, StopRule, DEFAULT_GAMMA_GRID};
use webguard_core::ingest::{BatchPolicy, HeaderProfile};
use webguard_core::rng::derive_seed;
use webguard_core::simulate::{Generator, SimConfig};
use webguard_core::theory::{ExponentConfig, FiniteDist};
use webguard_core::trace::catalog_lookup;

use crate::CliError;

pub const SEED_ENV: &str = "WEBGUARD_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    /// `all` (the five base generators), `extended` (adds the delayed bot)
    /// or a comma-separated list of generator names.
    pub classes: String,
    pub per_class: usize,
    /// Traces are lengthened until they hold this many records.
    pub min_events: usize,
    pub template: SimConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            classes: "all".into(),
            per_class: 10,
            min_events: 0,
            template: SimConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub rule: RuleKind,
    /// Margin threshold in nats.
    pub gamma: f64,
    /// Run length for the repeat rule.
    pub repeat: usize,
    pub gamma_grid: Vec<f64>,
    /// Keep only these events (catalog names) before preprocessing.
    pub events: Option<Vec<String>>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            rule: RuleKind::Margin,
            gamma: 5.0,
            repeat: 10,
            gamma_grid: DEFAULT_GAMMA_GRID.to_vec(),
            events: None,
        }
    }
}

impl DetectConfig {
    pub fn rule(&self) -> StopRule {
        match self.rule {
            RuleKind::Margin => StopRule::Margin { gamma: self.gamma },
            RuleKind::Repeat => StopRule::Repeat { q: self.repeat },
        }
    }

    pub fn grid(&self) -> Vec<StopRule> {
        match self.rule {
            RuleKind::Margin => self
                .gamma_grid
                .iter()
                .map(|&gamma| StopRule::Margin { gamma })
                .collect(),
            RuleKind::Repeat => self
                .gamma_grid
                .iter()
                .map(|&q| StopRule::Repeat { q: q as usize })
                .collect(),
        }
    }

    pub fn event_filter(&self) -> Result<Option<Vec<u8>>, CliError> {
        self.events
            .as_ref()
            .map(|names| {
                names
                    .iter()
                    .map(|n| catalog_lookup(n).map_err(|e| CliError::Usage(e.to_string())))
                    .collect()
            })
            .transpose()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub bind: String,
    pub bank: Option<PathBuf>,
    /// Directory the sessions are exported to on shutdown.
    pub store: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            bank: None,
            store: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverheadConfig {
    pub generator: Generator,
    pub sim: SimConfig,
    pub policy: BatchPolicy,
    /// Header sizes charged to each HTTP request/response pair.
    pub headers: HeaderProfile,
}

impl Default for OverheadConfig {
    fn default() -> Self {
        Self {
            generator: Generator::RandomNaive,
            sim: SimConfig {
                rate: 28.0,
                session_id: "overhead".into(),
                ..SimConfig::default()
            },
            policy: BatchPolicy::default(),
            headers: HeaderProfile::MEASURED,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LemmaConfig {
    pub p: FiniteDist,
    pub q: FiniteDist,
    pub subset: Vec<usize>,
    pub exponent: ExponentConfig,
    /// Random pairs checked against the subset-average identity.
    pub identity_pairs: usize,
    pub identity_alphabet: usize,
    pub identity_subset: usize,
    /// Allowed relative error of each empirical slope.
    pub tolerance: f64,
}

impl Default for LemmaConfig {
    fn default() -> Self {
        Self {
            p: FiniteDist::new(vec![0.4, 0.3, 0.2, 0.1]).expect("valid"),
            q: FiniteDist::new(vec![0.1, 0.2, 0.3, 0.4]).expect("valid"),
            subset: vec![0, 3],
            exponent: ExponentConfig::default(),
            identity_pairs: 1000,
            identity_alphabet: 6,
            identity_subset: 3,
            tolerance: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Every module seed is derived from this one.
    pub seed: u64,
    pub simulate: SimulateConfig,
    pub attribute: AttributeConfig,
    pub bank: BankConfig,
    pub detect: DetectConfig,
    pub serve: ServeConfig,
    pub replay: ReplayOptions,
    pub overhead: OverheadConfig,
    pub lemma: LemmaConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            simulate: SimulateConfig::default(),
            attribute: AttributeConfig::default(),
            bank: BankConfig::default(),
            detect: DetectConfig::default(),
            serve: ServeConfig::default(),
            replay: ReplayOptions::default(),
            overhead: OverheadConfig::default(),
            lemma: LemmaConfig::default(),
        }
    }
}

impl RunConfig {
    /// Writes the global seed into every module config.
    pub fn propagate_seed(&mut self) {
        let s = self.seed;
        self.simulate.template.seed = s;
        self.attribute.train.seed = derive_seed(s, &[1]);
        self.attribute.divergence.seed = derive_seed(s, &[2]);
        self.attribute.cluster.seed = derive_seed(s, &[3]);
        self.bank.train.seed = derive_seed(s, &[4]);
        self.overhead.sim.seed = s;
        self.lemma.exponent.seed = derive_seed(s, &[5]);
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults, then the seed from the environment, then `file`; flags are
/// applied by the caller afterwards.
pub fn load(file: Option<&Path>, env_seed: Option<&str>) -> Result<RunConfig, CliError> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("config serializes");
    if let Some(raw) = env_seed {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{raw}`")))?;
        value["seed"] = seed.into();
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let over: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        if !over.is_object() {
            return Err(CliError::Usage(format!(
                "config {} must be a JSON object",
                path.display()
            )));
        }
        merge(&mut value, over);
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))
}

/// Generators named by a class selector.
pub fn parse_classes(selector: &str) -> Result<Vec<Generator>, CliError> {
    match selector {
        "all" => Ok(Generator::BASE.to_vec()),
        "extended" => Ok(Generator::ALL.to_vec()),
        list => {
            let gens = list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<Generator>()
                        .map_err(|e| CliError::Usage(e.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if gens.is_empty() {
                return Err(CliError::Usage("no classes given".into()));
            }
            Ok(gens)
        }
    }
}
