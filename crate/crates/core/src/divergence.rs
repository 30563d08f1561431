//! Jeffreys divergence between the `t`-letter laws of two HMMs.
//!
//! Small problems are enumerated exactly; otherwise an unbiased Monte-Carlo
//! estimator draws length-`t` blocks from each model and averages the log
//! likelihood ratios. All values are in nats.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hmm::{Hmm, HmmError};
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum DivergenceError {
    #[error("models have alphabets of size {0} and {1}")]
    AlphabetMismatch(usize, usize),
    #[error("invalid divergence config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Hmm(#[from] HmmError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMethod {
    Exact,
    MonteCarlo,
    /// Exact when `A^t` fits under the enumeration cap, Monte-Carlo otherwise.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DivergenceConfig {
    /// Block length whose laws are compared.
    pub t: usize,
    pub method: DivergenceMethod,
    /// Samples drawn from each model in Monte-Carlo mode.
    pub mc_samples: usize,
    pub seed: u64,
    pub enumeration_cap: usize,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            t: 10,
            method: DivergenceMethod::Auto,
            mc_samples: 20_000,
            seed: 0,
            enumeration_cap: 1_000_000,
        }
    }
}

impl DivergenceConfig {
    fn validate(&self, alphabet_size: usize) -> Result<(), DivergenceError> {
        if self.t == 0 {
            return Err(DivergenceError::InvalidConfig("t must be >= 1".into()));
        }
        if self.mc_samples < 2 {
            return Err(DivergenceError::InvalidConfig("mc_samples must be >= 2".into()));
        }
        if self.enumeration_cap < alphabet_size {
            return Err(DivergenceError::InvalidConfig(
                "enumeration_cap must be at least the alphabet size".into(),
            ));
        }
        Ok(())
    }

    fn resolve(&self, alphabet_size: usize) -> DivergenceMethod {
        match self.method {
            DivergenceMethod::Auto => {
                if (alphabet_size as f64).powi(self.t as i32) <= self.enumeration_cap as f64 {
                    DivergenceMethod::Exact
                } else {
                    DivergenceMethod::MonteCarlo
                }
            }
            m => m,
        }
    }
}

fn same_alphabet(a: &Hmm, b: &Hmm) -> Result<(), DivergenceError> {
    if a.alphabet_size() != b.alphabet_size() {
        return Err(DivergenceError::AlphabetMismatch(a.alphabet_size(), b.alphabet_size()));
    }
    Ok(())
}

/// `sum (p - q) * (ln p - ln q)`, which is symmetric term by term.
fn jeffreys_of_laws(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(
            |(&pa, &pb)| {
                if pa == pb {
                    0.0
                } else {
                    (pa - pb) * (pa.ln() - pb.ln())
                }
            },
        )
        .sum()
}

pub fn jeffreys_exact(a: &Hmm, b: &Hmm, t: usize, cap: usize) -> Result<f64, DivergenceError> {
    same_alphabet(a, b)?;
    let p = a.t_letter_distribution(t, cap)?;
    let q = b.t_letter_distribution(t, cap)?;
    Ok(jeffreys_of_laws(&p, &q))
}

/// A Monte-Carlo estimate with its standard error, both in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    /// Variance of the mean.
    fn mean_variance(&self) -> f64 {
        let n = self.n as f64;
        let var = ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0);
        var / n
    }
}

/// For `m` blocks drawn from `models[source]`, the moments of
/// `ln P_source(x) - ln P_j(x)` for every `j`.
fn llr_moments(models: &[Hmm], source: usize, t: usize, m: usize, seed: u64) -> Vec<Moments> {
    let mut rng = rng::seeded(seed);
    let mut states: Vec<_> = models.iter().map(|h| h.start()).collect();
    let mut lls = vec![0.0; models.len()];
    let mut moments = vec![Moments::default(); models.len()];
    for _ in 0..m {
        let block = models[source].sample_with(&mut rng, t);
        for ((h, st), ll) in models.iter().zip(states.iter_mut()).zip(lls.iter_mut()) {
            st.reset();
            for &x in &block {
                h.forward_step(st, x).expect("sampled symbol within alphabet");
            }
            *ll = st.log_likelihood();
        }
        let own = lls[source];
        for (mo, ll) in moments.iter_mut().zip(&lls) {
            mo.push(own - ll);
        }
    }
    moments
}

pub fn jeffreys_mc(a: &Hmm, b: &Hmm, t: usize, m: usize, seed: u64) -> Result<McEstimate, DivergenceError> {
    same_alphabet(a, b)?;
    if t == 0 || m < 2 {
        return Err(DivergenceError::InvalidConfig("need t >= 1 and m >= 2".into()));
    }
    let pair = [a.clone(), b.clone()];
    let from_a = llr_moments(&pair, 0, t, m, rng::derive_seed(seed, &[0]))[1];
    let from_b = llr_moments(&pair, 1, t, m, rng::derive_seed(seed, &[1]))[0];
    Ok(McEstimate {
        estimate: from_a.mean() + from_b.mean(),
        stderr: (from_a.mean_variance() + from_b.mean_variance()).sqrt(),
    })
}

/// Symmetric matrix of pairwise divergences with per-entry provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivMatrix {
    pub n: usize,
    pub trace_ids: Vec<String>,
    /// Row-major `n x n`.
    pub values: Vec<f64>,
    /// Standard error per entry; zero for exact entries.
    pub stderr: Vec<f64>,
    pub method: DivergenceMethod,
    pub t: usize,
}

impl DivMatrix {
    /// Builds an exact-valued matrix from row-major values.
    pub fn from_values(trace_ids: Vec<String>, values: Vec<f64>) -> Self {
        let n = trace_ids.len();
        assert_eq!(values.len(), n * n, "values must be n x n");
        Self {
            n,
            trace_ids,
            stderr: vec![0.0; n * n],
            values,
            method: DivergenceMethod::Exact,
            t: 0,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn stderr_of(&self, i: usize, j: usize) -> f64 {
        self.stderr[i * self.n + j]
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Reorders rows and columns: entry `(i, j)` of the result is entry
    /// `(perm[i], perm[j])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut values = vec![0.0; n * n];
        let mut stderr = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = self.get(perm[i], perm[j]);
                stderr[i * n + j] = self.stderr_of(perm[i], perm[j]);
            }
        }
        Self {
            n,
            trace_ids: perm.iter().map(|&p| self.trace_ids[p].clone()).collect(),
            values,
            stderr,
            method: self.method,
            t: self.t,
        }
    }
}

/// Largest number of `f64`s kept when caching every model's `t`-letter law.
const LAW_CACHE_LIMIT: usize = 1 << 25;

pub fn pairwise_divergence(
    models: &[Hmm],
    trace_ids: Vec<String>,
    config: &DivergenceConfig,
) -> Result<DivMatrix, DivergenceError> {
    let n = models.len();
    if trace_ids.len() != n {
        return Err(DivergenceError::InvalidConfig("one id per model required".into()));
    }
    let alphabet = models.first().map_or(1, |m| m.alphabet_size());
    for m in models {
        if m.alphabet_size() != alphabet {
            return Err(DivergenceError::AlphabetMismatch(alphabet, m.alphabet_size()));
        }
    }
    config.validate(alphabet)?;
    let method = config.resolve(alphabet);
    let mut values = vec![0.0; n * n];
    let mut stderr = vec![0.0; n * n];
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();

    match method {
        DivergenceMethod::Exact => {
            let outcomes = (alphabet as f64).powi(config.t as i32);
            let entries: Vec<f64> = if outcomes * n as f64 <= LAW_CACHE_LIMIT as f64 {
                let laws = models
                    .par_iter()
                    .map(|m| m.t_letter_distribution(config.t, config.enumeration_cap))
                    .collect::<Result<Vec<_>, _>>()?;
                pairs
                    .par_iter()
                    .map(|&(i, j)| jeffreys_of_laws(&laws[i], &laws[j]))
                    .collect()
            } else {
                pairs
                    .par_iter()
                    .map(|&(i, j)| jeffreys_exact(&models[i], &models[j], config.t, config.enumeration_cap))
                    .collect::<Result<Vec<_>, _>>()?
            };
            for (&(i, j), d) in pairs.iter().zip(entries) {
                values[i * n + j] = d;
                values[j * n + i] = d;
            }
        }
        DivergenceMethod::MonteCarlo => {
            // Each model's blocks are drawn once, from a seed derived from
            // its index, and scored under every other model.
            let moments: Vec<Vec<Moments>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    llr_moments(
                        models,
                        i,
                        config.t,
                        config.mc_samples,
                        rng::derive_seed(config.seed, &[i as u64]),
                    )
                })
                .collect();
            for &(i, j) in &pairs {
                let (ij, ji) = (moments[i][j], moments[j][i]);
                let d = ij.mean() + ji.mean();
                let se = (ij.mean_variance() + ji.mean_variance()).sqrt();
                values[i * n + j] = d;
                values[j * n + i] = d;
                stderr[i * n + j] = se;
                stderr[j * n + i] = se;
            }
        }
        DivergenceMethod::Auto => unreachable!("resolved above"),
    }
    Ok(DivMatrix {
        n,
        trace_ids,
        values,
        stderr,
        method,
        t: config.t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::tests::{iid, random_hmm};

    /// Two-symbol Jeffreys divergence written out by hand.
    fn two_point(p0: f64, q0: f64) -> f64 {
        let (p1, q1) = (1.0 - p0, 1.0 - q0);
        p0 * (p0 / q0).ln() + p1 * (p1 / q1).ln() + q0 * (q0 / p0).ln() + q1 * (q1 / p1).ln()
    }

    #[test]
    fn bernoulli_example() {
        let oracle = two_point(0.5, 0.9);
        assert!((oracle - 0.878_889_830_934_487_7).abs() < 1e-12);
        assert!((oracle - 0.8789).abs() < 5e-5);
        let d = jeffreys_exact(&iid(&[0.5, 0.5]), &iid(&[0.9, 0.1]), 1, 100).unwrap();
        assert!((d - oracle).abs() < 1e-12);
    }

    #[test]
    fn identity_is_zero() {
        let h = random_hmm(2, 3, 3);
        assert_eq!(jeffreys_exact(&h, &h, 4, 1000).unwrap(), 0.0);
    }

    #[test]
    fn iid_additivity() {
        let (a, b) = (iid(&[0.2, 0.3, 0.5]), iid(&[0.4, 0.4, 0.2]));
        let d1 = jeffreys_exact(&a, &b, 1, 1000).unwrap();
        for t in 2..6 {
            let dt = jeffreys_exact(&a, &b, t, 1000).unwrap();
            assert!((dt - t as f64 * d1).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_symmetric_nonnegative() {
        for seed in 0..20 {
            let a = random_hmm(seed, 2, 3);
            let b = random_hmm(seed + 1000, 3, 3);
            let ab = jeffreys_exact(&a, &b, 3, 1000).unwrap();
            let ba = jeffreys_exact(&b, &a, 3, 1000).unwrap();
            assert_eq!(ab, ba);
            assert!(ab >= 0.0);
        }
    }

    #[test]
    fn monotone_separation() {
        let base = iid(&[0.5, 0.5]);
        let mut prev = -1.0;
        for k in 1..9 {
            let p = 0.5 + 0.05 * k as f64;
            let d = jeffreys_exact(&base, &iid(&[p, 1.0 - p]), 2, 100).unwrap();
            assert!(d > prev);
            prev = d;
        }
    }

    #[test]
    fn errors() {
        let a = iid(&[0.5, 0.5]);
        let b = iid(&[0.2, 0.3, 0.5]);
        assert_eq!(
            jeffreys_exact(&a, &b, 1, 10),
            Err(DivergenceError::AlphabetMismatch(2, 3))
        );
        assert!(matches!(
            jeffreys_mc(&a, &b, 1, 10, 0),
            Err(DivergenceError::AlphabetMismatch(2, 3))
        ));
        assert!(matches!(
            jeffreys_exact(&a, &a, 30, 1000),
            Err(DivergenceError::Hmm(HmmError::CapExceeded { .. }))
        ));
    }

    #[test]
    fn mc_identity_and_agreement() {
        let h = random_hmm(5, 2, 3);
        let same = jeffreys_mc(&h, &h, 4, 2000, 1).unwrap();
        assert!(same.estimate.abs() <= 3.0 * same.stderr + 1e-12);

        let other = random_hmm(6, 2, 3);
        let exact = jeffreys_exact(&h, &other, 4, 1000).unwrap();
        let mc = jeffreys_mc(&h, &other, 4, 5000, 2).unwrap();
        assert!((mc.estimate - exact).abs() <= 3.0 * mc.stderr, "{exact} vs {mc:?}");
    }

    #[test]
    fn mc_stderr_scaling() {
        let (a, b) = (random_hmm(1, 2, 4), random_hmm(2, 2, 4));
        let small = jeffreys_mc(&a, &b, 5, 2000, 3).unwrap();
        let large = jeffreys_mc(&a, &b, 5, 8000, 3).unwrap();
        let ratio = small.stderr / large.stderr;
        assert!((1.6..2.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn matrix_contracts() {
        let h = random_hmm(3, 2, 3);
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let cfg = DivergenceConfig {
            t: 3,
            method: DivergenceMethod::Exact,
            ..Default::default()
        };
        let dup = pairwise_divergence(&vec![h.clone(); 4], ids.clone(), &cfg).unwrap();
        assert!(dup.values.iter().all(|v| *v == 0.0));

        let models = vec![random_hmm(1, 2, 3), random_hmm(2, 2, 3), random_hmm(3, 3, 3)];
        let m = pairwise_divergence(&models, ids[..3].to_vec(), &cfg).unwrap();
        assert!(m.is_symmetric());
        for i in 0..3 {
            assert_eq!(m.get(i, i), 0.0);
            for j in 0..3 {
                if i != j {
                    let direct = jeffreys_exact(&models[i], &models[j], 3, 1_000_000).unwrap();
                    assert!((m.get(i, j) - direct).abs() < 1e-12);
                }
            }
        }

        let auto = DivergenceConfig {
            t: 8,
            method: DivergenceMethod::Auto,
            enumeration_cap: 100,
            mc_samples: 500,
            seed: 4,
        };
        let mc = pairwise_divergence(&models, ids[..3].to_vec(), &auto).unwrap();
        assert_eq!(mc.method, DivergenceMethod::MonteCarlo);
        assert!(mc.is_symmetric());
        assert!(mc.stderr_of(0, 1) > 0.0);
        assert_eq!(mc.stderr_of(1, 1), 0.0);
        // deterministic regardless of thread scheduling
        assert_eq!(mc, pairwise_divergence(&models, ids[..3].to_vec(), &auto).unwrap());
    }
}
