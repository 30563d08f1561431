//! Numerical checks of the sampled Chernoff-Stein lemma: KL divergence, the
//! error exponent of a test that only sees symbols from a subset, the
//! subset-averaging identity behind it, and Monte-Carlo slope estimates.
//!
//! Type-II errors at useful `n` are far too rare for plain simulation, so
//! [`empirical_exponent_ratio`] samples under the null and reweights by the
//! likelihood ratio of what each test observes.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("alphabet sizes differ ({0} vs {1})")]
    AlphabetMismatch(usize, usize),
    #[error("invalid subset: {0}")]
    InvalidSubset(String),
    #[error("{0} subsets is too many to enumerate")]
    TooManySubsets(u128),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no type-II events observed at n = {0}")]
    InsufficientTrials(usize),
}

/// A strictly positive probability vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FiniteDist {
    probs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for FiniteDist {
    type Error = TheoryError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        FiniteDist::new(v)
    }
}

impl From<FiniteDist> for Vec<f64> {
    fn from(d: FiniteDist) -> Self {
        d.probs
    }
}

impl FiniteDist {
    pub fn new(probs: Vec<f64>) -> Result<Self, TheoryError> {
        if probs.is_empty() {
            return Err(TheoryError::InvalidDistribution("empty".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
            return Err(TheoryError::InvalidDistribution(format!(
                "entry {p} is not strictly positive"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(TheoryError::InvalidDistribution(format!("sums to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Result<Self, TheoryError> {
        Self::new(vec![1.0 / n as f64; n])
    }

    /// Normalized i.i.d. unit-exponential weights (a flat Dirichlet draw).
    pub fn random(rng: &mut Rng, n: usize) -> Self {
        let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-9).collect();
        let total: f64 = w.iter().sum();
        Self {
            probs: w.iter().map(|x| x / total).collect(),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn mass(&self, subset: &[usize]) -> f64 {
        subset.iter().map(|&y| self.probs[y]).sum()
    }

    /// The law conditioned on landing in `subset`, indexed like `subset`.
    pub fn conditional(&self, subset: &[usize]) -> Vec<f64> {
        let m = self.mass(subset);
        subset.iter().map(|&y| self.probs[y] / m).collect()
    }

    fn sample(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.probs.len() - 1
    }
}

fn same_alphabet(p: &FiniteDist, q: &FiniteDist) -> Result<(), TheoryError> {
    if p.len() != q.len() {
        return Err(TheoryError::AlphabetMismatch(p.len(), q.len()));
    }
    Ok(())
}

fn check_subset(subset: &[usize], n: usize) -> Result<(), TheoryError> {
    if subset.is_empty() {
        return Err(TheoryError::InvalidSubset("empty".into()));
    }
    let mut seen = vec![false; n];
    for &y in subset {
        if y >= n {
            return Err(TheoryError::InvalidSubset(format!(
                "symbol {y} outside alphabet of {n}"
            )));
        }
        if std::mem::replace(&mut seen[y], true) {
            return Err(TheoryError::InvalidSubset(format!("symbol {y} repeated")));
        }
    }
    Ok(())
}

/// Kullback-Leibler divergence D(p || q) in nats.
pub fn kl(p: &FiniteDist, q: &FiniteDist) -> Result<f64, TheoryError> {
    same_alphabet(p, q)?;
    Ok(p.probs.iter().zip(&q.probs).map(|(a, b)| a * (a / b).ln()).sum())
}

fn first_term(p: &FiniteDist, q: &FiniteDist, subset: &[usize]) -> f64 {
    subset
        .iter()
        .map(|&y| p.probs[y] * (p.probs[y] / q.probs[y]).ln())
        .sum()
}

/// Error exponent, per original symbol, of the test that only sees the
/// symbols falling in `subset`:
/// `sum_{y in Y} p(y) ln(p(y)/q(y)) + p(Y) ln(q(Y)/p(Y))`.
pub fn sampled_exponent(p: &FiniteDist, q: &FiniteDist, subset: &[usize]) -> Result<f64, TheoryError> {
    same_alphabet(p, q)?;
    check_subset(subset, p.len())?;
    if subset.len() == p.len() {
        return kl(p, q);
    }
    let (pm, qm) = (p.mass(subset), q.mass(subset));
    Ok(first_term(p, q, subset) + pm * (qm / pm).ln())
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Largest subset count [`subset_average_first_term`] will enumerate.
pub const MAX_SUBSETS: u128 = 10_000_000;

/// Average of the first term of [`sampled_exponent`] over every subset of
/// `subset_size` symbols, by enumeration.
pub fn subset_average_first_term(p: &FiniteDist, q: &FiniteDist, subset_size: usize) -> Result<f64, TheoryError> {
    same_alphabet(p, q)?;
    let n = p.len();
    if subset_size == 0 || subset_size > n {
        return Err(TheoryError::InvalidSubset(format!(
            "size {subset_size} outside 1..={n}"
        )));
    }
    let count = binomial(n, subset_size);
    if count > MAX_SUBSETS {
        return Err(TheoryError::TooManySubsets(count));
    }
    let terms: Vec<f64> = p.probs.iter().zip(&q.probs).map(|(a, b)| a * (a / b).ln()).collect();
    let mut idx: Vec<usize> = (0..subset_size).collect();
    let mut total = 0.0;
    loop {
        total += idx.iter().map(|&y| terms[y]).sum::<f64>();
        // advance to the next combination in lexicographic order
        let mut i = subset_size;
        while i > 0 && idx[i - 1] == n - subset_size + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        idx[i - 1] += 1;
        for j in i..subset_size {
            idx[j] = idx[j - 1] + 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExponentConfig {
    pub n_grid: Vec<usize>,
    pub trials: usize,
    /// Type-I error budget of both tests.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for ExponentConfig {
    fn default() -> Self {
        Self {
            n_grid: vec![250, 500, 1000, 2000],
            trials: 10_000,
            epsilon: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentRow {
    pub n: usize,
    /// Natural log of the estimated type-II error of each test.
    pub full_log_beta: f64,
    pub sampled_log_beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentTable {
    pub rows: Vec<ExponentRow>,
    /// Least-squares slopes of `-ln beta` against `n`.
    pub full_slope: f64,
    pub sampled_slope: f64,
    pub kl: f64,
    pub sampled_exponent: f64,
}

impl ExponentTable {
    pub fn slope_ratio(&self) -> f64 {
        self.full_slope / self.sampled_slope
    }
}

/// Least-squares slope of `y` on `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn log_mean_exp(values: &[f64], count: usize) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + (values.iter().map(|v| (v - m).exp()).sum::<f64>() / count as f64).ln()
}

/// One trial's statistics: the log-likelihood ratio (null over alternative)
/// of the full sequence and of the subsequence restricted to `subset`, and
/// the log-likelihood ratio of everything the subsampled test observes.
struct Trial {
    full: f64,
    sampled: f64,
    sampled_weight: f64,
}

/// Neyman-Pearson type-II error estimate: accept the null when the statistic
/// is at least the largest threshold keeping the type-I rate within `epsilon`,
/// then average `exp(-llr)` over accepted null draws.
fn log_type_two(stats: &[(f64, f64)], epsilon: f64) -> Option<f64> {
    let mut sorted: Vec<f64> = stats.iter().map(|s| s.0).collect();
    sorted.sort_by(f64::total_cmp);
    let reject = ((epsilon * stats.len() as f64).floor() as usize).min(stats.len() - 1);
    let tau = sorted[reject];
    let accepted: Vec<f64> = stats.iter().filter(|s| s.0 >= tau).map(|s| -s.1).collect();
    if accepted.is_empty() {
        return None;
    }
    Some(log_mean_exp(&accepted, stats.len()))
}

/// Monte-Carlo type-II exponents of the full-sequence and subsampled
/// likelihood-ratio tests of `p` against `q` over `config.n_grid`.
pub fn empirical_exponent_ratio(
    p: &FiniteDist,
    q: &FiniteDist,
    subset: &[usize],
    config: &ExponentConfig,
) -> Result<ExponentTable, TheoryError> {
    same_alphabet(p, q)?;
    check_subset(subset, p.len())?;
    if p == q {
        return Err(TheoryError::InvalidConfig("p and q must differ".into()));
    }
    if config.n_grid.len() < 2 || config.n_grid.contains(&0) {
        return Err(TheoryError::InvalidConfig(
            "n_grid needs at least two positive sizes".into(),
        ));
    }
    if config.trials < 2 || !(config.epsilon > 0.0 && config.epsilon < 0.5) {
        return Err(TheoryError::InvalidConfig(
            "trials >= 2 and epsilon in (0, 0.5) required".into(),
        ));
    }
    let llr: Vec<f64> = p.probs.iter().zip(&q.probs).map(|(a, b)| (a / b).ln()).collect();
    let mut in_subset = vec![None; p.len()];
    let (pc, qc) = (p.conditional(subset), q.conditional(subset));
    for (k, &y) in subset.iter().enumerate() {
        in_subset[y] = Some((pc[k] / qc[k]).ln());
    }
    let (pm, qm) = (p.mass(subset), q.mass(subset));
    let (hit, miss) = ((pm / qm).ln(), ((1.0 - pm) / (1.0 - qm)).ln());

    let mut rows = Vec::with_capacity(config.n_grid.len());
    for (g, &n) in config.n_grid.iter().enumerate() {
        let trials: Vec<Trial> = (0..config.trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = rng::derived(config.seed, &[g as u64, t as u64]);
                let (mut full, mut sampled, mut kept) = (0.0, 0.0, 0usize);
                for _ in 0..n {
                    let x = p.sample(&mut rng);
                    full += llr[x];
                    if let Some(l) = in_subset[x] {
                        sampled += l;
                        kept += 1;
                    }
                }
                let weight = if pm < 1.0 {
                    sampled + kept as f64 * hit + (n - kept) as f64 * miss
                } else {
                    sampled
                };
                Trial {
                    full,
                    sampled,
                    sampled_weight: weight,
                }
            })
            .collect();
        let full: Vec<(f64, f64)> = trials.iter().map(|t| (t.full, t.full)).collect();
        let sampled: Vec<(f64, f64)> = trials.iter().map(|t| (t.sampled, t.sampled_weight)).collect();
        let full_log_beta = log_type_two(&full, config.epsilon).ok_or(TheoryError::InsufficientTrials(n))?;
        let sampled_log_beta = log_type_two(&sampled, config.epsilon).ok_or(TheoryError::InsufficientTrials(n))?;
        if !full_log_beta.is_finite() || !sampled_log_beta.is_finite() {
            return Err(TheoryError::InsufficientTrials(n));
        }
        rows.push(ExponentRow {
            n,
            full_log_beta,
            sampled_log_beta,
        });
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let full_slope = -ls_slope(&ns, &rows.iter().map(|r| r.full_log_beta).collect::<Vec<_>>());
    let sampled_slope = -ls_slope(&ns, &rows.iter().map(|r| r.sampled_log_beta).collect::<Vec<_>>());
    Ok(ExponentTable {
        rows,
        full_slope,
        sampled_slope,
        kl: kl(p, q)?,
        sampled_exponent: sampled_exponent(p, q, subset)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(v: &[f64]) -> FiniteDist {
        FiniteDist::new(v.to_vec()).unwrap()
    }

    #[test]
    fn kl_examples() {
        let p = d(&[0.5, 0.5]);
        let q = d(&[0.9, 0.1]);
        let hand = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl(&p, &q).unwrap() - hand).abs() < 1e-15);
        assert!((kl(&p, &q).unwrap() - 0.5108).abs() < 1e-4);
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        assert!(matches!(
            kl(&p, &d(&[0.2, 0.3, 0.5])),
            Err(TheoryError::AlphabetMismatch(2, 3))
        ));
    }

    #[test]
    fn dist_validation() {
        assert!(FiniteDist::new(vec![0.5, 0.5]).is_ok());
        assert!(FiniteDist::new(vec![1.0, 0.0]).is_err());
        assert!(FiniteDist::new(vec![0.5, 0.6]).is_err());
        assert!(FiniteDist::new(vec![]).is_err());
        let back: FiniteDist = serde_json::from_str("[0.25,0.75]").unwrap();
        assert_eq!(back, d(&[0.25, 0.75]));
        assert!(serde_json::from_str::<FiniteDist>("[0.25,0.5]").is_err());
    }

    #[test]
    fn sampled_exponent_examples() {
        let p = FiniteDist::uniform(4).unwrap();
        let q = d(&[0.7, 0.1, 0.1, 0.1]);
        let direct = 0.25 * (0.25f64 / 0.7).ln() + 0.25 * (0.25f64 / 0.1).ln() + 0.5 * (0.8f64 / 0.5).ln();
        assert!((sampled_exponent(&p, &q, &[0, 1]).unwrap() - direct).abs() < 1e-15);
        assert_eq!(sampled_exponent(&p, &q, &[0, 1, 2, 3]).unwrap(), kl(&p, &q).unwrap());
        for s in [&[0usize][..], &[1, 3], &[0, 2, 3]] {
            assert_eq!(sampled_exponent(&q, &q, s).unwrap(), 0.0);
        }
        assert!(sampled_exponent(&p, &q, &[]).is_err());
        assert!(sampled_exponent(&p, &q, &[4]).is_err());
        assert!(sampled_exponent(&p, &q, &[1, 1]).is_err());
    }

    #[test]
    fn subset_average_examples() {
        let mut rng = rng::seeded(3);
        let p = FiniteDist::random(&mut rng, 4);
        let q = FiniteDist::random(&mut rng, 4);
        let full = kl(&p, &q).unwrap();
        assert!((subset_average_first_term(&p, &q, 4).unwrap() - full).abs() < 1e-15);
        assert!((subset_average_first_term(&p, &q, 2).unwrap() - 0.5 * full).abs() < 1e-15);
        assert!(subset_average_first_term(&p, &q, 0).is_err());
        assert!(subset_average_first_term(&p, &q, 5).is_err());
        let big = FiniteDist::uniform(60).unwrap();
        assert!(matches!(
            subset_average_first_term(&big, &big, 30),
            Err(TheoryError::TooManySubsets(_))
        ));
    }

    #[test]
    fn combination_count() {
        assert_eq!(binomial(4, 2), 6);
        assert_eq!(binomial(10, 0), 1);
        assert_eq!(binomial(52, 5), 2_598_960);
    }

    #[test]
    fn least_squares_slope() {
        assert!((ls_slope(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 2.0).abs() < 1e-15);
        assert!((ls_slope(&[0.0, 1.0, 2.0, 3.0], &[1.0, 0.0, 1.0, 0.0]) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn exponent_config_errors() {
        let p = d(&[0.5, 0.5]);
        let q = d(&[0.9, 0.1]);
        let cfg = ExponentConfig::default();
        assert!(empirical_exponent_ratio(&p, &p, &[0], &cfg).is_err());
        let one = ExponentConfig {
            n_grid: vec![100],
            ..cfg.clone()
        };
        assert!(empirical_exponent_ratio(&p, &q, &[0], &one).is_err());
        let eps = ExponentConfig { epsilon: 0.7, ..cfg };
        assert!(empirical_exponent_ratio(&p, &q, &[0], &eps).is_err());
    }

    #[test]
    fn exponent_estimates_are_deterministic() {
        let p = d(&[0.4, 0.3, 0.2, 0.1]);
        let q = d(&[0.1, 0.2, 0.3, 0.4]);
        let cfg = ExponentConfig {
            n_grid: vec![20, 40],
            trials: 500,
            ..ExponentConfig::default()
        };
        let a = empirical_exponent_ratio(&p, &q, &[0, 3], &cfg).unwrap();
        let b = empirical_exponent_ratio(&p, &q, &[0, 3], &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.rows.iter().all(|r| r.full_log_beta < 0.0 && r.sampled_log_beta < 0.0));
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(seed in 0u64..10_000, n in 2usize..12) {
            let mut rng = rng::seeded(seed);
            let p = FiniteDist::random(&mut rng, n);
            let q = FiniteDist::random(&mut rng, n);
            prop_assert!(kl(&p, &q).unwrap() >= 0.0);
        }

        #[test]
        fn full_subset_is_kl(seed in 0u64..10_000, n in 2usize..10) {
            let mut rng = rng::seeded(seed);
            let p = FiniteDist::random(&mut rng, n);
            let q = FiniteDist::random(&mut rng, n);
            let mut all: Vec<usize> = (0..n).collect();
            all.reverse();
            prop_assert_eq!(sampled_exponent(&p, &q, &all).unwrap(), kl(&p, &q).unwrap());
        }
    }
}
