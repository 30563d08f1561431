//! Discrete-emission hidden Markov models.
//!
//! Likelihoods use the scaled forward recursion; the log-likelihood is the
//! sum of the log scaling constants. Training is multi-sequence Baum-Welch
//! with a probability floor so that any two trained models are mutually
//! absolutely continuous.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, categorical, Rng};

#[derive(Debug, Error, PartialEq)]
pub enum HmmError {
    #[error("no training sequences")]
    EmptyInput,
    #[error("empty symbol sequence")]
    EmptySequence,
    #[error("symbol {symbol} outside alphabet of size {alphabet_size}")]
    SymbolOutOfRange { symbol: u32, alphabet_size: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{outcomes} outcomes exceed the enumeration cap of {cap}")]
    CapExceeded { outcomes: f64, cap: usize },
}

const STOCHASTIC_TOL: f64 = 1e-9;

/// An HMM over states `0..num_states` and symbols `0..alphabet_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hmm {
    num_states: usize,
    alphabet_size: usize,
    initial: Vec<f64>,
    /// Row-major `num_states x num_states`.
    transition: Vec<f64>,
    /// Row-major `num_states x alphabet_size`.
    emission: Vec<f64>,
}

impl Hmm {
    pub fn new(
        num_states: usize,
        alphabet_size: usize,
        initial: Vec<f64>,
        transition: Vec<f64>,
        emission: Vec<f64>,
    ) -> Result<Self, HmmError> {
        let hmm = Self {
            num_states,
            alphabet_size,
            initial,
            transition,
            emission,
        };
        hmm.validate()?;
        Ok(hmm)
    }

    /// Checks dimensions and stochasticity; used after deserialization too.
    pub fn validate(&self) -> Result<(), HmmError> {
        let (s, a) = (self.num_states, self.alphabet_size);
        if s == 0 || a == 0 {
            return Err(HmmError::InvalidModel("dimensions must be >= 1".into()));
        }
        if self.initial.len() != s || self.transition.len() != s * s || self.emission.len() != s * a {
            return Err(HmmError::InvalidModel("array sizes do not match dimensions".into()));
        }
        let check = |row: &[f64], what: &str| -> Result<(), HmmError> {
            if row.iter().any(|p| !(0.0..=1.0 + STOCHASTIC_TOL).contains(p)) {
                return Err(HmmError::InvalidModel(format!("{what} has entries outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(HmmError::InvalidModel(format!("{what} sums to {sum}")));
            }
            Ok(())
        };
        check(&self.initial, "initial distribution")?;
        for i in 0..s {
            check(self.transition_row(i), "transition row")?;
            check(self.emission_row(i), "emission row")?;
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transition_row(&self, i: usize) -> &[f64] {
        &self.transition[i * self.num_states..(i + 1) * self.num_states]
    }

    pub fn emission_row(&self, i: usize) -> &[f64] {
        &self.emission[i * self.alphabet_size..(i + 1) * self.alphabet_size]
    }

    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.transition[from * self.num_states + to]
    }

    pub fn emission(&self, state: usize, symbol: usize) -> f64 {
        self.emission[state * self.alphabet_size + symbol]
    }

    /// Stationary distribution of the hidden chain, solving `pi P = pi`
    /// with `sum(pi) = 1`.
    pub fn stationary_distribution(&self) -> Vec<f64> {
        let s = self.num_states;
        let mut m = DMatrix::from_fn(s, s, |i, j| self.transition(j, i) - if i == j { 1.0 } else { 0.0 });
        let mut rhs = DVector::zeros(s);
        for j in 0..s {
            m[(s - 1, j)] = 1.0;
        }
        rhs[s - 1] = 1.0;
        let mut pi: Vec<f64> = match m.lu().solve(&rhs) {
            Some(v) => v.iter().map(|p| p.max(0.0)).collect(),
            None => self.initial.clone(),
        };
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= total);
        pi
    }

    /// The same chain started from `initial`.
    pub fn with_initial(&self, initial: Vec<f64>) -> Result<Hmm, HmmError> {
        Hmm::new(
            self.num_states,
            self.alphabet_size,
            initial,
            self.transition.clone(),
            self.emission.clone(),
        )
    }

    /// Smallest parameter value, for checking the training floor.
    pub fn min_probability(&self) -> f64 {
        self.initial
            .iter()
            .chain(&self.transition)
            .chain(&self.emission)
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest absolute parameter difference between two same-shaped models.
    pub fn max_abs_diff(&self, other: &Hmm) -> Option<f64> {
        if self.num_states != other.num_states || self.alphabet_size != other.alphabet_size {
            return None;
        }
        let a = self.initial.iter().chain(&self.transition).chain(&self.emission);
        let b = other.initial.iter().chain(&other.transition).chain(&other.emission);
        Some(a.zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
    }

    fn check_symbol(&self, symbol: u32) -> Result<usize, HmmError> {
        if (symbol as usize) < self.alphabet_size {
            Ok(symbol as usize)
        } else {
            Err(HmmError::SymbolOutOfRange {
                symbol,
                alphabet_size: self.alphabet_size,
            })
        }
    }

    pub fn start(&self) -> ForwardState {
        ForwardState {
            alpha: vec![0.0; self.num_states],
            scratch: vec![0.0; self.num_states],
            log_likelihood: 0.0,
            steps: 0,
        }
    }

    /// Advances the scaled forward recursion by one symbol.
    pub fn forward_step(&self, state: &mut ForwardState, symbol: u32) -> Result<(), HmmError> {
        let x = self.check_symbol(symbol)?;
        let s = self.num_states;
        if state.steps == 0 {
            for i in 0..s {
                state.scratch[i] = self.initial[i] * self.emission(i, x);
            }
        } else {
            for j in 0..s {
                let mut acc = 0.0;
                for i in 0..s {
                    acc += state.alpha[i] * self.transition(i, j);
                }
                state.scratch[j] = acc * self.emission(j, x);
            }
        }
        let c: f64 = state.scratch.iter().sum();
        state.steps += 1;
        if c > 0.0 && state.log_likelihood > f64::NEG_INFINITY {
            for (a, v) in state.alpha.iter_mut().zip(&state.scratch) {
                *a = v / c;
            }
            state.log_likelihood += c.ln();
        } else {
            state.log_likelihood = f64::NEG_INFINITY;
        }
        Ok(())
    }

    /// Natural-log probability of `symbols` under the model.
    pub fn forward_log_likelihood(&self, symbols: &[u32]) -> Result<f64, HmmError> {
        if symbols.is_empty() {
            return Err(HmmError::EmptySequence);
        }
        let mut st = self.start();
        for &x in symbols {
            self.forward_step(&mut st, x)?;
        }
        Ok(st.log_likelihood)
    }

    /// Draws `n` symbols.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<u32> {
        let mut rng = rng::seeded(seed);
        self.sample_with(&mut rng, n)
    }

    pub fn sample_with(&self, rng: &mut Rng, n: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(n);
        if n == 0 {
            return out;
        }
        let mut state = categorical(&self.initial, rng.random());
        for k in 0..n {
            if k > 0 {
                state = categorical(self.transition_row(state), rng.random());
            }
            out.push(categorical(self.emission_row(state), rng.random()) as u32);
        }
        out
    }

    /// Law of the first `t` emissions, indexed lexicographically with the
    /// first symbol most significant.
    pub fn t_letter_distribution(&self, t: usize, cap: usize) -> Result<Vec<f64>, HmmError> {
        if t == 0 {
            return Err(HmmError::InvalidConfig("horizon must be >= 1".into()));
        }
        let outcomes = (self.alphabet_size as f64).powi(t as i32);
        if outcomes > cap as f64 {
            return Err(HmmError::CapExceeded { outcomes, cap });
        }
        let (s, a) = (self.num_states, self.alphabet_size);
        // Unnormalized forward vectors for every prefix of the current length.
        let mut level: Vec<f64> = Vec::with_capacity(a * s);
        for x in 0..a {
            for i in 0..s {
                level.push(self.initial[i] * self.emission(i, x));
            }
        }
        for _ in 1..t {
            let mut next = Vec::with_capacity(level.len() * a);
            for alpha in level.chunks_exact(s) {
                let mut pred = vec![0.0; s];
                for (j, p) in pred.iter_mut().enumerate() {
                    *p = (0..s).map(|i| alpha[i] * self.transition(i, j)).sum();
                }
                for x in 0..a {
                    for j in 0..s {
                        next.push(pred[j] * self.emission(j, x));
                    }
                }
            }
            level = next;
        }
        Ok(level.chunks_exact(s).map(|alpha| alpha.iter().sum()).collect())
    }
}

/// Running forward recursion for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardState {
    alpha: Vec<f64>,
    scratch: Vec<f64>,
    log_likelihood: f64,
    steps: usize,
}

impl ForwardState {
    /// Rewinds to the empty prefix, keeping the allocations.
    pub fn reset(&mut self) {
        self.alpha.iter_mut().for_each(|a| *a = 0.0);
        self.log_likelihood = 0.0;
        self.steps = 0;
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Filtered state distribution after the last step.
    pub fn filtered(&self) -> &[f64] {
        &self.alpha
    }
}

/// How each restart draws its starting parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Every row drawn from a flat Dirichlet.
    #[default]
    Dirichlet,
    /// Emission rows are the pooled symbol frequencies reweighted by
    /// independent unit-exponential factors; other rows as in `Dirichlet`.
    Empirical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub num_states: usize,
    pub max_iters: usize,
    /// Stop when the total log-likelihood changes by less than this.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Minimum value of every trained probability.
    pub floor: f64,
    pub init: InitScheme,
    /// Weight of the identity mixed into each initial transition matrix.
    pub stickiness: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_states: 4,
            max_iters: 100,
            tol: 1e-4,
            restarts: 3,
            seed: 0,
            floor: 1e-6,
            init: InitScheme::Dirichlet,
            stickiness: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, alphabet_size: usize) -> Result<(), HmmError> {
        if self.num_states == 0 {
            return Err(HmmError::InvalidConfig("num_states must be >= 1".into()));
        }
        if self.max_iters == 0 || self.restarts == 0 {
            return Err(HmmError::InvalidConfig("max_iters and restarts must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(HmmError::InvalidConfig("tol must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.stickiness) {
            return Err(HmmError::InvalidConfig("stickiness must lie in [0, 1)".into()));
        }
        let max_floor = 1.0 / alphabet_size.max(self.num_states) as f64;
        if !(self.floor > 0.0 && self.floor < max_floor) {
            return Err(HmmError::InvalidConfig(format!("floor must lie in (0, {max_floor})")));
        }
        Ok(())
    }
}

/// Diagnostics from one Baum-Welch run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FitReport {
    /// Per restart, the training log-likelihood at each E-step.
    pub log_likelihoods: Vec<Vec<f64>>,
    /// Per restart, the log-likelihood of each M-step update before the
    /// floor is applied. Only filled by [`baum_welch_fit_audited`].
    pub unfloored_updates: Vec<Vec<f64>>,
    pub best_restart: usize,
    pub best_log_likelihood: f64,
    /// Alphabets smaller than two carry no information.
    pub degenerate_alphabet: bool,
}

/// Clamps entries below `floor` to it and rescales the rest so the row still
/// sums to one.
fn floor_row(row: &mut [f64], floor: f64) {
    let total: f64 = row.iter().sum();
    if total > 0.0 {
        row.iter_mut().for_each(|p| *p /= total);
    } else {
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|p| *p = u);
    }
    let mut pinned = vec![false; row.len()];
    loop {
        let mut changed = false;
        for (p, pin) in row.iter_mut().zip(pinned.iter_mut()) {
            if !*pin && *p < floor {
                *p = floor;
                *pin = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let pinned_mass = pinned.iter().filter(|p| **p).count() as f64 * floor;
        let free: f64 = row.iter().zip(&pinned).filter(|(_, p)| !**p).map(|(v, _)| v).sum();
        if free <= 0.0 {
            break;
        }
        let scale = (1.0 - pinned_mass) / free;
        for (p, pin) in row.iter_mut().zip(&pinned) {
            if !*pin {
                *p *= scale;
            }
        }
    }
}

fn random_row(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= total);
    row
}

fn symbol_frequencies(sequences: &[&[u32]], a: usize) -> Vec<f64> {
    let mut freq = vec![0.0; a];
    for &x in sequences.iter().flat_map(|s| s.iter()) {
        freq[x as usize] += 1.0;
    }
    let total: f64 = freq.iter().sum();
    freq.iter_mut().for_each(|f| *f /= total);
    freq
}

fn empirical_model(rng: &mut Rng, s: usize, freq: &[f64], floor: f64) -> Hmm {
    let mut model = random_model(rng, s, freq.len(), floor);
    for i in 0..s {
        let mut row: Vec<f64> = freq
            .iter()
            .map(|f| f * Distribution::<f64>::sample(&Exp1, rng))
            .collect();
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
        floor_row(&mut row, floor);
        model.emission[i * freq.len()..(i + 1) * freq.len()].copy_from_slice(&row);
    }
    model
}

fn random_model(rng: &mut Rng, s: usize, a: usize, floor: f64) -> Hmm {
    let mut initial = random_row(rng, s);
    floor_row(&mut initial, floor);
    let mut transition = Vec::with_capacity(s * s);
    for _ in 0..s {
        let mut row = random_row(rng, s);
        floor_row(&mut row, floor);
        transition.extend(row);
    }
    let mut emission = Vec::with_capacity(s * a);
    for _ in 0..s {
        let mut row = random_row(rng, a);
        floor_row(&mut row, floor);
        emission.extend(row);
    }
    Hmm {
        num_states: s,
        alphabet_size: a,
        initial,
        transition,
        emission,
    }
}

/// Expected sufficient statistics accumulated over all sequences.
struct Counts {
    initial: Vec<f64>,
    transition: Vec<f64>,
    emission: Vec<f64>,
    log_likelihood: f64,
}

fn e_step(hmm: &Hmm, sequences: &[&[u32]]) -> Counts {
    let (s, a) = (hmm.num_states, hmm.alphabet_size);
    let mut counts = Counts {
        initial: vec![0.0; s],
        transition: vec![0.0; s * s],
        emission: vec![0.0; s * a],
        log_likelihood: 0.0,
    };
    let mut alpha = Vec::new();
    let mut scale = Vec::new();
    let mut beta = vec![0.0; s];
    let mut beta_next = vec![0.0; s];
    let mut gamma = vec![0.0; s];

    for seq in sequences {
        let n = seq.len();
        alpha.clear();
        alpha.resize(n * s, 0.0);
        scale.clear();
        scale.resize(n, 0.0);

        // forward
        for (t, &x) in seq.iter().enumerate() {
            let x = x as usize;
            let mut c = 0.0;
            for j in 0..s {
                let pred = if t == 0 {
                    hmm.initial[j]
                } else {
                    (0..s).map(|i| alpha[(t - 1) * s + i] * hmm.transition(i, j)).sum()
                };
                let v = pred * hmm.emission(j, x);
                alpha[t * s + j] = v;
                c += v;
            }
            for j in 0..s {
                alpha[t * s + j] /= c;
            }
            scale[t] = c;
            counts.log_likelihood += c.ln();
        }

        // backward, accumulating as we go
        beta.iter_mut().for_each(|b| *b = 1.0);
        for t in (0..n).rev() {
            let x = seq[t] as usize;
            let mut norm = 0.0;
            for i in 0..s {
                gamma[i] = alpha[t * s + i] * beta[i];
                norm += gamma[i];
            }
            for i in 0..s {
                let g = gamma[i] / norm;
                counts.emission[i * a + x] += g;
                if t == 0 {
                    counts.initial[i] += g;
                }
            }
            if t > 0 {
                // xi(t-1 -> t)
                let c = scale[t];
                for i in 0..s {
                    let ai = alpha[(t - 1) * s + i];
                    for j in 0..s {
                        counts.transition[i * s + j] += ai * hmm.transition(i, j) * hmm.emission(j, x) * beta[j] / c;
                    }
                }
                for i in 0..s {
                    beta_next[i] = (0..s)
                        .map(|j| hmm.transition(i, j) * hmm.emission(j, x) * beta[j])
                        .sum::<f64>()
                        / c;
                }
                std::mem::swap(&mut beta, &mut beta_next);
            }
        }
    }
    counts
}

fn m_step(counts: &Counts, s: usize, a: usize, floor: Option<f64>) -> Hmm {
    let apply = |row: &mut [f64]| match floor {
        Some(f) => floor_row(row, f),
        None => {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|p| *p /= total);
            } else {
                let u = 1.0 / row.len() as f64;
                row.iter_mut().for_each(|p| *p = u);
            }
        }
    };
    let mut initial = counts.initial.clone();
    apply(&mut initial);
    let mut transition = counts.transition.clone();
    transition.chunks_exact_mut(s).for_each(apply);
    let mut emission = counts.emission.clone();
    emission.chunks_exact_mut(a).for_each(apply);
    Hmm {
        num_states: s,
        alphabet_size: a,
        initial,
        transition,
        emission,
    }
}

fn total_log_likelihood(hmm: &Hmm, sequences: &[&[u32]]) -> f64 {
    sequences
        .iter()
        .map(|s| hmm.forward_log_likelihood(s).unwrap_or(f64::NEG_INFINITY))
        .sum()
}

fn prepare(sequences: &[&[u32]], alphabet_size: Option<usize>, config: &TrainConfig) -> Result<usize, HmmError> {
    if sequences.is_empty() {
        return Err(HmmError::EmptyInput);
    }
    if sequences.iter().any(|s| s.is_empty()) {
        return Err(HmmError::EmptySequence);
    }
    let max_symbol = sequences.iter().flat_map(|s| s.iter()).copied().max().unwrap_or(0);
    let a = alphabet_size.unwrap_or(max_symbol as usize + 1);
    if max_symbol as usize >= a {
        return Err(HmmError::SymbolOutOfRange {
            symbol: max_symbol,
            alphabet_size: a,
        });
    }
    config.validate(a)?;
    Ok(a)
}

struct EmRun {
    model: Hmm,
    log_likelihoods: Vec<f64>,
    unfloored: Vec<f64>,
    final_ll: f64,
}

fn run_em(mut model: Hmm, sequences: &[&[u32]], config: &TrainConfig, audit: bool) -> EmRun {
    let (s, a) = (model.num_states, model.alphabet_size);
    let mut lls = Vec::new();
    let mut unfloored = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    let mut converged = false;
    for _ in 0..config.max_iters {
        let counts = e_step(&model, sequences);
        let ll = counts.log_likelihood;
        lls.push(ll);
        if (ll - prev).abs() < config.tol {
            converged = true;
            break;
        }
        prev = ll;
        if audit {
            let raw = m_step(&counts, s, a, None);
            unfloored.push(total_log_likelihood(&raw, sequences));
        }
        model = m_step(&counts, s, a, Some(config.floor));
    }
    let final_ll = if converged {
        lls[lls.len() - 1]
    } else {
        total_log_likelihood(&model, sequences)
    };
    EmRun {
        model,
        log_likelihoods: lls,
        unfloored,
        final_ll,
    }
}

fn fit_inner(
    sequences: &[&[u32]],
    alphabet_size: Option<usize>,
    config: &TrainConfig,
    audit: bool,
) -> Result<(Hmm, FitReport), HmmError> {
    let a = prepare(sequences, alphabet_size, config)?;
    let s = config.num_states;
    let mut report = FitReport {
        degenerate_alphabet: a < 2,
        best_log_likelihood: f64::NEG_INFINITY,
        ..FitReport::default()
    };
    let mut best: Option<Hmm> = None;
    let freq = match config.init {
        InitScheme::Dirichlet => None,
        InitScheme::Empirical => Some(symbol_frequencies(sequences, a)),
    };

    for restart in 0..config.restarts {
        let mut rng = rng::derived(config.seed, &[restart as u64]);
        let mut model = match &freq {
            None => random_model(&mut rng, s, a, config.floor),
            Some(freq) => empirical_model(&mut rng, s, freq, config.floor),
        };
        if config.stickiness > 0.0 {
            for i in 0..s {
                for j in 0..s {
                    let v = &mut model.transition[i * s + j];
                    *v = (1.0 - config.stickiness) * *v + if i == j { config.stickiness } else { 0.0 };
                }
                floor_row(&mut model.transition[i * s..(i + 1) * s], config.floor);
            }
        }
        let run = run_em(model, sequences, config, audit);
        report.log_likelihoods.push(run.log_likelihoods);
        report.unfloored_updates.push(run.unfloored);
        if run.final_ll > report.best_log_likelihood || best.is_none() {
            report.best_log_likelihood = run.final_ll;
            report.best_restart = restart;
            best = Some(run.model);
        }
    }
    Ok((best.expect("at least one restart"), report))
}

/// Baum-Welch started from `init` instead of random restarts. `restarts`,
/// `seed`, `init`, `stickiness` and `num_states` of the config are ignored.
pub fn baum_welch_refine(init: &Hmm, sequences: &[&[u32]], config: &TrainConfig) -> Result<(Hmm, FitReport), HmmError> {
    let a = prepare(sequences, Some(init.alphabet_size), config)?;
    let run = run_em(init.clone(), sequences, config, false);
    let report = FitReport {
        degenerate_alphabet: a < 2,
        best_log_likelihood: run.final_ll,
        best_restart: 0,
        log_likelihoods: vec![run.log_likelihoods],
        unfloored_updates: vec![run.unfloored],
    };
    Ok((run.model, report))
}

/// Multi-sequence Baum-Welch: expected counts are pooled across all
/// sequences before each M-step. The alphabet size defaults to the largest
/// symbol plus one.
pub fn baum_welch_fit(
    sequences: &[&[u32]],
    alphabet_size: Option<usize>,
    config: &TrainConfig,
) -> Result<Hmm, HmmError> {
    fit_inner(sequences, alphabet_size, config, false).map(|(h, _)| h)
}

pub fn baum_welch_fit_with_report(
    sequences: &[&[u32]],
    alphabet_size: Option<usize>,
    config: &TrainConfig,
) -> Result<(Hmm, FitReport), HmmError> {
    fit_inner(sequences, alphabet_size, config, false)
}

/// Like [`baum_welch_fit_with_report`], additionally evaluating every
/// unfloored M-step update so EM monotonicity can be checked.
pub fn baum_welch_fit_audited(
    sequences: &[&[u32]],
    alphabet_size: Option<usize>,
    config: &TrainConfig,
) -> Result<(Hmm, FitReport), HmmError> {
    fit_inner(sequences, alphabet_size, config, true)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Sum over every state path, straight from the definition.
    pub(crate) fn brute_force_likelihood(hmm: &Hmm, symbols: &[u32]) -> f64 {
        let s = hmm.num_states();
        let n = symbols.len();
        let mut total = 0.0;
        let mut path = vec![0usize; n];
        loop {
            let mut p = hmm.initial()[path[0]] * hmm.emission(path[0], symbols[0] as usize);
            for k in 1..n {
                p *= hmm.transition(path[k - 1], path[k]) * hmm.emission(path[k], symbols[k] as usize);
            }
            total += p;
            // odometer increment
            let mut k = 0;
            loop {
                if k == n {
                    return total;
                }
                path[k] += 1;
                if path[k] < s {
                    break;
                }
                path[k] = 0;
                k += 1;
            }
        }
    }

    pub(crate) fn iid(emission: &[f64]) -> Hmm {
        Hmm::new(1, emission.len(), vec![1.0], vec![1.0], emission.to_vec()).unwrap()
    }

    pub(crate) fn random_hmm(seed: u64, s: usize, a: usize) -> Hmm {
        random_model(&mut rng::seeded(seed), s, a, 1e-3)
    }

    #[test]
    fn single_state_product() {
        let h = iid(&[0.25, 0.75]);
        let ll = h.forward_log_likelihood(&[1, 1, 0]).unwrap();
        assert!((ll - 0.140625f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn two_state_matches_paths() {
        let h = Hmm::new(
            2,
            3,
            vec![0.6, 0.4],
            vec![0.7, 0.3, 0.2, 0.8],
            vec![0.5, 0.4, 0.1, 0.1, 0.3, 0.6],
        )
        .unwrap();
        let seq = [0, 2, 1, 2];
        let brute = brute_force_likelihood(&h, &seq).ln();
        assert!((h.forward_log_likelihood(&seq).unwrap() - brute).abs() < 1e-10);
    }

    #[test]
    fn stationary_two_state() {
        let h = Hmm::new(2, 1, vec![1.0, 0.0], vec![0.9, 0.1, 0.4, 0.6], vec![1.0, 1.0]).unwrap();
        let pi = h.stationary_distribution();
        assert!((pi[0] - 0.8).abs() < 1e-12 && (pi[1] - 0.2).abs() < 1e-12);
        for seed in 0..20 {
            let h = random_hmm(seed, 4, 3);
            let pi = h.stationary_distribution();
            for j in 0..4 {
                let next: f64 = (0..4).map(|i| pi[i] * h.transition(i, j)).sum();
                assert!((next - pi[j]).abs() < 1e-12);
            }
            let moved = h.with_initial(pi).unwrap();
            assert_eq!(moved.emission_row(2), h.emission_row(2));
        }
    }

    #[test]
    fn prefix_monotonicity() {
        let h = random_hmm(3, 3, 4);
        let seq = h.sample(30, 1);
        let mut prev = 0.0;
        for n in 1..=seq.len() {
            let ll = h.forward_log_likelihood(&seq[..n]).unwrap();
            assert!(ll <= prev + 1e-12);
            prev = ll;
        }
    }

    #[test]
    fn forward_errors() {
        let h = iid(&[0.5, 0.5]);
        assert_eq!(h.forward_log_likelihood(&[]), Err(HmmError::EmptySequence));
        assert_eq!(
            h.forward_log_likelihood(&[0, 2]),
            Err(HmmError::SymbolOutOfRange {
                symbol: 2,
                alphabet_size: 2
            })
        );
    }

    #[test]
    fn rejects_non_stochastic() {
        assert!(Hmm::new(1, 2, vec![1.0], vec![1.0], vec![0.5, 0.6]).is_err());
        assert!(Hmm::new(2, 2, vec![1.0], vec![1.0], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn recovers_iid_emission() {
        let truth = iid(&[0.3, 0.7]);
        let data = truth.sample(10_000, 11);
        let cfg = TrainConfig {
            num_states: 1,
            seed: 5,
            ..TrainConfig::default()
        };
        let fit = baum_welch_fit(&[&data], Some(2), &cfg).unwrap();
        assert!((fit.emission(0, 0) - 0.3).abs() < 0.02, "{}", fit.emission(0, 0));
    }

    #[test]
    fn em_is_monotone() {
        for seed in 0..5 {
            let truth = random_hmm(seed, 3, 4);
            let data = truth.sample(400, seed + 100);
            let cfg = TrainConfig {
                num_states: 3,
                max_iters: 40,
                tol: 1e-9,
                restarts: 2,
                seed,
                floor: 1e-6,
                ..Default::default()
            };
            let (_, report) = baum_welch_fit_audited(&[&data], Some(4), &cfg).unwrap();
            for (lls, ups) in report.log_likelihoods.iter().zip(&report.unfloored_updates) {
                for (k, up) in ups.iter().enumerate() {
                    assert!(*up >= lls[k] - 1e-8, "restart decreased: {} -> {}", lls[k], up);
                }
            }
        }
    }

    #[test]
    fn fit_is_deterministic_and_floored() {
        let truth = random_hmm(9, 2, 5);
        let a = truth.sample(300, 1);
        let b = truth.sample(200, 2);
        let cfg = TrainConfig {
            num_states: 2,
            seed: 42,
            ..TrainConfig::default()
        };
        let m1 = baum_welch_fit(&[&a, &b], Some(8), &cfg).unwrap();
        let m2 = baum_welch_fit(&[&a, &b], Some(8), &cfg).unwrap();
        assert_eq!(m1, m2);
        m1.validate().unwrap();
        assert!(m1.min_probability() >= cfg.floor * (1.0 - 1e-12));
    }

    #[test]
    fn fit_errors() {
        let cfg = TrainConfig::default();
        assert_eq!(baum_welch_fit(&[], None, &cfg), Err(HmmError::EmptyInput));
        assert_eq!(baum_welch_fit(&[&[]], None, &cfg), Err(HmmError::EmptySequence));
        assert!(matches!(
            baum_welch_fit(&[&[5]], Some(3), &cfg),
            Err(HmmError::SymbolOutOfRange { .. })
        ));
        let bad = TrainConfig { floor: 0.6, ..cfg };
        assert!(matches!(
            baum_welch_fit(&[&[0, 1]], None, &bad),
            Err(HmmError::InvalidConfig(_))
        ));
        let (_, report) =
            baum_welch_fit_with_report(&[&[0, 0, 0]], None, &TrainConfig { num_states: 1, ..cfg }).unwrap();
        assert!(report.degenerate_alphabet);
    }

    #[test]
    fn stickiness_bounds() {
        let seq: &[u32] = &[0, 1, 1, 0, 2, 2, 2, 1];
        for bad in [-0.1, 1.0, f64::NAN] {
            let cfg = TrainConfig {
                stickiness: bad,
                ..TrainConfig::default()
            };
            assert!(matches!(
                baum_welch_fit(&[seq], None, &cfg),
                Err(HmmError::InvalidConfig(_))
            ));
        }
        let cfg = TrainConfig {
            stickiness: 0.5,
            init: InitScheme::Empirical,
            ..TrainConfig::default()
        };
        let m = baum_welch_fit(&[seq], None, &cfg).unwrap();
        assert!(m.validate().is_ok());
        assert_eq!(m, baum_welch_fit(&[seq], None, &cfg).unwrap());
    }

    #[test]
    fn floor_row_respects_floor() {
        let mut row = vec![0.0, 0.0, 1.0, 1e-9];
        floor_row(&mut row, 1e-3);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|p| *p >= 1e-3 - 1e-15));
    }

    #[test]
    fn sampling() {
        let forced = Hmm::new(
            2,
            3,
            vec![1.0, 0.0],
            vec![0.0, 1.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(forced.sample(5, 3), vec![2, 0, 2, 0, 2]);

        let h = iid(&[0.2, 0.5, 0.3]);
        let xs = h.sample(100_000, 8);
        for (sym, p) in [0.2, 0.5, 0.3].iter().enumerate() {
            let f = xs.iter().filter(|x| **x == sym as u32).count() as f64 / xs.len() as f64;
            assert!((f - p).abs() < 0.01);
        }
        assert_eq!(h.sample(50, 4), h.sample(50, 4));
    }

    #[test]
    fn t_letter_examples() {
        let h = random_hmm(1, 3, 3);
        let d1 = h.t_letter_distribution(1, 1000).unwrap();
        for x in 0..3 {
            let mix: f64 = (0..3).map(|s| h.initial()[s] * h.emission(s, x)).sum();
            assert!((d1[x] - mix).abs() < 1e-15);
        }
        let e = [0.1, 0.6, 0.3];
        let d2 = iid(&e).t_letter_distribution(2, 1000).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert!((d2[a * 3 + b] - e[a] * e[b]).abs() < 1e-15);
            }
        }
        assert!(matches!(
            h.t_letter_distribution(7, 1000),
            Err(HmmError::CapExceeded { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn forward_matches_brute_force(seed in 0u64..10_000, s in 1usize..4, a in 1usize..5, n in 1usize..7) {
            let h = random_hmm(seed, s, a);
            let seq = h.sample(n, seed ^ 0xabc);
            let brute = brute_force_likelihood(&h, &seq).ln();
            prop_assert!((h.forward_log_likelihood(&seq).unwrap() - brute).abs() < 1e-10);
        }

        #[test]
        fn t_letter_normalized_and_consistent(seed in 0u64..10_000, s in 1usize..4, a in 2usize..4, t in 1usize..5) {
            let h = random_hmm(seed, s, a);
            let d = h.t_letter_distribution(t, 100_000).unwrap();
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (idx, p) in d.iter().enumerate() {
                let mut seq = vec![0u32; t];
                let mut rem = idx;
                for k in (0..t).rev() {
                    seq[k] = (rem % a) as u32;
                    rem /= a;
                }
                let ll = h.forward_log_likelihood(&seq).unwrap();
                prop_assert!((ll.exp() - p).abs() < 1e-12);
            }
        }
    }
}
