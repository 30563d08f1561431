//! Offline attribution: clustering sessions by the divergence between their
//! fitted models, and external metrics for scoring a clustering against
//! ground truth.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergence::{pairwise_divergence, DivMatrix, DivergenceConfig, DivergenceError};
use crate::hmm::{baum_welch_fit, baum_welch_refine, Hmm, HmmError, InitScheme, TrainConfig};
use crate::preprocess::{Pipeline, PreprocessConfig, PreprocessError, ProcessedTrace};
use crate::rng::{self, Rng};
use crate::trace::Trace;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("cannot form {k} clusters from {n} items")]
    TooFewItems { k: usize, n: usize },
    #[error("invalid cluster config: {0}")]
    InvalidConfig(String),
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty label vectors")]
    Empty,
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Hmm(#[from] HmmError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    Spectral,
    Agglomerative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub k: usize,
    pub method: ClusterMethod,
    /// Width of the Gaussian kernel applied to divergences.
    pub sigma: f64,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 5,
            method: ClusterMethod::Spectral,
            sigma: 9.0,
            kmeans_restarts: 10,
            seed: 0,
        }
    }
}

/// One agglomerative merge step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// Slots of the merged clusters; the result keeps slot `a`.
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClusterMetadata {
    Spectral {
        /// Smallest Laplacian eigenvalues, ascending.
        eigenvalues: Vec<f64>,
        /// Items whose affinity degree is effectively zero.
        isolated: Vec<usize>,
        inertia: f64,
    },
    Agglomerative {
        merges: Vec<Merge>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Cluster per item, numbered in order of first appearance.
    pub labels: Vec<usize>,
    pub metadata: ClusterMetadata,
}

fn check_k(k: usize, n: usize) -> Result<(), ClusterError> {
    if k == 0 || k > n {
        return Err(ClusterError::TooFewItems { k, n });
    }
    Ok(())
}

/// Renumbers labels by first appearance.
fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

pub fn spectral_cluster(div: &DivMatrix, config: &ClusterConfig) -> Result<ClusterResult, ClusterError> {
    let n = div.n;
    check_k(config.k, n)?;
    if !(config.sigma > 0.0) {
        return Err(ClusterError::InvalidConfig("sigma must be > 0".into()));
    }
    if config.kmeans_restarts == 0 {
        return Err(ClusterError::InvalidConfig("kmeans_restarts must be >= 1".into()));
    }
    let two_sigma_sq = 2.0 * config.sigma * config.sigma;
    let affinity = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            // Monte-Carlo entries can dip below zero.
            let d = div.get(i, j).max(0.0);
            (-d * d / two_sigma_sq).exp()
        }
    });
    let degree: Vec<f64> = (0..n).map(|i| affinity.row(i).sum()).collect();
    let isolated: Vec<usize> = (0..n).filter(|&i| degree[i] < 1e-12).collect();
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d < 1e-12 { 0.0 } else { 1.0 / d.sqrt() })
        .collect();
    let laplacian = DMatrix::from_fn(n, n, |i, j| {
        let eye = if i == j { 1.0 } else { 0.0 };
        eye - inv_sqrt[i] * affinity[(i, j)] * inv_sqrt[j]
    });
    let eig = SymmetricEigen::new(laplacian);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let chosen = &order[..config.k];

    let mut points: Vec<Vec<f64>> = (0..n)
        .map(|i| chosen.iter().map(|&c| eig.eigenvectors[(i, c)]).collect())
        .collect();
    for p in &mut points {
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            p.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let (labels, inertia) = kmeans(&points, config.k, config.kmeans_restarts, config.seed);
    Ok(ClusterResult {
        labels: canonical(&labels),
        metadata: ClusterMetadata::Spectral {
            eigenvalues: chosen.iter().map(|&c| eig.eigenvalues[c]).collect(),
            isolated,
            inertia,
        },
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            // all remaining points coincide with a center
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> (Vec<usize>, f64) {
    let n = points.len();
    let k = centers.len();
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .unwrap_or(0);
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // re-seed an empty cluster at the point farthest from its center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centers[labels[a]]).total_cmp(&sq_dist(&points[b], &centers[labels[b]]))
                    })
                    .unwrap_or(0);
                centers[c] = points[far].clone();
                labels[far] = c;
            }
        }
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
    (labels, inertia)
}

/// Seeded k-means++ with restarts; keeps the lowest inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for r in 0..restarts.max(1) {
        let mut rng = rng::derived(seed, &[r as u64]);
        let centers = kmeans_pp_init(points, k, &mut rng);
        let (labels, inertia) = lloyd(points, centers);
        if best.as_ref().is_none_or(|(_, b)| inertia < *b - 1e-12) {
            best = Some((labels, inertia));
        }
    }
    best.expect("at least one restart")
}

/// Average-linkage agglomerative clustering. Ties go to the lowest-index pair.
pub fn agglomerative_cluster(div: &DivMatrix, k: usize) -> Result<ClusterResult, ClusterError> {
    let n = div.n;
    check_k(k, n)?;
    let mut dist: Vec<f64> = div.values.clone();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n - k);

    for _ in 0..(n - k) {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..n {
                if !active[j] {
                    continue;
                }
                let d = dist[i * n + j];
                if best.is_none_or(|(_, _, b)| d < b) {
                    best = Some((i, j, d));
                }
            }
        }
        let (a, b, d) = best.expect("more than k active clusters");
        let (sa, sb) = (size[a] as f64, size[b] as f64);
        for c in 0..n {
            if active[c] && c != a && c != b {
                let merged = (sa * dist[a * n + c] + sb * dist[b * n + c]) / (sa + sb);
                dist[a * n + c] = merged;
                dist[c * n + a] = merged;
            }
        }
        active[b] = false;
        size[a] += size[b];
        for o in owner.iter_mut() {
            if *o == b {
                *o = a;
            }
        }
        merges.push(Merge {
            a,
            b,
            distance: d,
            size: size[a],
        });
    }
    Ok(ClusterResult {
        labels: canonical(&owner),
        metadata: ClusterMetadata::Agglomerative { merges },
    })
}

pub fn cluster(div: &DivMatrix, config: &ClusterConfig) -> Result<ClusterResult, ClusterError> {
    match config.method {
        ClusterMethod::Spectral => spectral_cluster(div, config),
        ClusterMethod::Agglomerative => agglomerative_cluster(div, config.k),
    }
}

/// The five external clustering scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringMetrics {
    pub ari: f64,
    pub ami: f64,
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
}

struct Contingency {
    n: usize,
    table: Vec<Vec<usize>>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn contingency(truth: &[usize], predicted: &[usize]) -> Contingency {
    let t = canonical(truth);
    let p = canonical(predicted);
    let r = t.iter().max().map_or(0, |m| m + 1);
    let c = p.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; c]; r];
    for (&a, &b) in t.iter().zip(&p) {
        table[a][b] += 1;
    }
    let rows = table.iter().map(|row| row.iter().sum()).collect();
    let cols = (0..c).map(|j| table.iter().map(|row| row[j]).sum()).collect();
    Contingency {
        n: truth.len(),
        table,
        rows,
        cols,
    }
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_information(ct: &Contingency) -> f64 {
    let n = ct.n as f64;
    let mut mi = 0.0;
    for (i, row) in ct.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (ct.rows[i] as f64 * ct.cols[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Expected mutual information under random permutations with the observed
/// marginals (hypergeometric model).
fn expected_mutual_information(ct: &Contingency) -> f64 {
    let n = ct.n;
    let mut ln_fact = vec![0.0; n + 1];
    for k in 1..=n {
        ln_fact[k] = ln_fact[k - 1] + (k as f64).ln();
    }
    let nf = n as f64;
    let mut emi = 0.0;
    for &a in &ct.rows {
        for &b in &ct.cols {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            for nij in lo..=hi {
                let x = nij as f64;
                let term = x / nf * (nf * x / (a as f64 * b as f64)).ln();
                let ln_p = ln_fact[a] + ln_fact[b] + ln_fact[n - a] + ln_fact[n - b]
                    - ln_fact[n]
                    - ln_fact[nij]
                    - ln_fact[a - nij]
                    - ln_fact[b - nij]
                    - ln_fact[n + nij - a - b];
                emi += term * ln_p.exp();
            }
        }
    }
    emi
}

fn comb2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// ARI, AMI (arithmetic-mean normalization), homogeneity, completeness and
/// V-measure, with entropies in nats.
pub fn clustering_metrics(predicted: &[usize], truth: &[usize]) -> Result<ClusteringMetrics, ClusterError> {
    if predicted.len() != truth.len() {
        return Err(ClusterError::LengthMismatch(predicted.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(ClusterError::Empty);
    }
    let ct = contingency(truth, predicted);
    let n = ct.n;
    let (r, c) = (ct.rows.len(), ct.cols.len());

    let ari = if (r == 1 && c == 1) || (r == n && c == n) {
        1.0
    } else {
        let index: f64 = ct.table.iter().flatten().map(|&x| comb2(x)).sum();
        let sum_a: f64 = ct.rows.iter().map(|&x| comb2(x)).sum();
        let sum_b: f64 = ct.cols.iter().map(|&x| comb2(x)).sum();
        let expected = sum_a * sum_b / comb2(n);
        let max = 0.5 * (sum_a + sum_b);
        if max == expected {
            0.0
        } else {
            (index - expected) / (max - expected)
        }
    };

    let h_truth = entropy(&ct.rows, n);
    let h_pred = entropy(&ct.cols, n);
    let mi = mutual_information(&ct);
    let homogeneity = if h_truth == 0.0 {
        1.0
    } else {
        (mi / h_truth).clamp(0.0, 1.0)
    };
    let completeness = if h_pred == 0.0 {
        1.0
    } else {
        (mi / h_pred).clamp(0.0, 1.0)
    };
    let v_measure = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };

    let ami = if (r == 1 && c == 1) || (r == 0 && c == 0) {
        1.0
    } else {
        let emi = expected_mutual_information(&ct);
        let mut denom = 0.5 * (h_truth + h_pred) - emi;
        if denom.abs() < f64::EPSILON {
            denom = if denom < 0.0 { -f64::EPSILON } else { f64::EPSILON };
        }
        (mi - emi) / denom
    };

    Ok(ClusteringMetrics {
        ari,
        ami,
        homogeneity,
        completeness,
        v_measure,
    })
}

/// Everything produced by the offline attribution pipeline, kept for audit.
#[derive(Clone, Debug, Serialize)]
pub struct Attribution {
    pub pipeline: Pipeline,
    #[serde(skip)]
    pub processed: Vec<ProcessedTrace>,
    pub models: Vec<Hmm>,
    pub divergence: DivMatrix,
    pub result: ClusterResult,
}

/// Which state distribution the per-trace models start from when their
/// block laws are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartLaw {
    /// The initial distribution estimated by Baum-Welch.
    Fitted,
    /// The stationary distribution of the fitted transition matrix.
    #[default]
    Stationary,
}

/// How the per-trace models are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FitStrategy {
    /// A separate random-restart fit for every trace.
    Independent,
    /// One background model fitted on the first `prefix` symbols of every
    /// trace, then refined on each full trace for at most `refine_iters`
    /// Baum-Welch rounds.
    Shared { prefix: usize, refine_iters: usize },
}

impl Default for FitStrategy {
    fn default() -> Self {
        FitStrategy::Shared {
            prefix: 2000,
            refine_iters: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeConfig {
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub fit: FitStrategy,
    pub start: StartLaw,
    pub divergence: DivergenceConfig,
    pub cluster: ClusterConfig,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::CLUSTERING,
            train: TrainConfig {
                restarts: 5,
                init: InitScheme::Empirical,
                stickiness: 0.5,
                ..TrainConfig::default()
            },
            fit: FitStrategy::default(),
            start: StartLaw::default(),
            divergence: DivergenceConfig::default(),
            cluster: ClusterConfig::default(),
        }
    }
}

/// Unsupervised attribution: preprocess every trace, fit one HMM per trace,
/// build the pairwise divergence matrix and cluster it.
///
/// Independent fits of the same agent often settle in different local
/// optima, which reads as divergence between them; [`FitStrategy::Shared`]
/// starts every trace from a common model instead. A single trace gives Baum-Welch one observation of the starting state, so
/// the fitted initial distribution is close to a point mass.
/// [`StartLaw::Stationary`] replaces it before divergences are taken.
pub fn attribute(traces: &[Trace], config: &AttributeConfig) -> Result<Attribution, ClusterError> {
    check_k(config.cluster.k, traces.len())?;
    if let FitStrategy::Shared { prefix, refine_iters } = config.fit {
        if prefix == 0 || refine_iters == 0 {
            return Err(ClusterError::InvalidConfig(
                "shared fit needs prefix and refine_iters >= 1".into(),
            ));
        }
    }
    let pipeline = Pipeline::fit(traces, config.preprocess)?;
    let processed = traces
        .par_iter()
        .map(|t| pipeline.process(t))
        .collect::<Result<Vec<_>, _>>()?;
    let alphabet = pipeline.alphabet_size();
    let finish = |model: Hmm| match config.start {
        StartLaw::Fitted => Ok(model),
        StartLaw::Stationary => model.with_initial(model.stationary_distribution()),
    };
    let models = match config.fit {
        FitStrategy::Independent => processed
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let cfg = TrainConfig {
                    seed: rng::derive_seed(config.train.seed, &[i as u64]),
                    ..config.train
                };
                finish(baum_welch_fit(&[&p.symbols], Some(alphabet), &cfg)?)
            })
            .collect::<Result<Vec<_>, _>>()?,
        FitStrategy::Shared { prefix, refine_iters } => {
            let pooled: Vec<&[u32]> = processed
                .iter()
                .map(|p| &p.symbols[..p.symbols.len().min(prefix)])
                .collect();
            let background = baum_welch_fit(&pooled, Some(alphabet), &config.train)?;
            let cfg = TrainConfig {
                max_iters: refine_iters,
                ..config.train
            };
            processed
                .par_iter()
                .map(|p| finish(baum_welch_refine(&background, &[&p.symbols], &cfg)?.0))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    let ids = traces.iter().map(|t| t.session_id().to_string()).collect();
    let divergence = pairwise_divergence(&models, ids, &config.divergence)?;
    let result = cluster(&divergence, &config.cluster)?;
    Ok(Attribution {
        pipeline,
        processed,
        models,
        divergence,
        result,
    })
}
