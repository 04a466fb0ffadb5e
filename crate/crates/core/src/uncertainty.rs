//! Text ambiguity (TAS) and mapping uncertainty (MUS) scores, and the routing
//! of a `(TAS, MUS)` pair to a clarifying-question level.
//!
//! TAS is the semantic entropy of the query's caption neighborhood: the top-K
//! captions are grouped by single-linkage over a cosine threshold, each group
//! gets its share of the (non-negative) similarity mass, and the Shannon
//! entropy of those shares is normalized by `ln K` and damped for long
//! queries.
//!
//! MUS turns the top-k similarity scores into a distribution that keeps only
//! the squared excess over the mean, then measures its Jensen-Shannon
//! divergence from the one-hot "rank 1 is certainly right" distribution,
//! normalized by `ln 2`.
//!
//! All logarithms are natural.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding_store::{cosine, Embedding, EmbeddingIndex, SimilarityList, StoreError};

const SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cluster threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("all similarity mass is zero across {k} neighbors")]
    DegenerateMass { k: usize },
    #[error("need at least 2 scores, got {0}")]
    TooFewScores(usize),
    #[error("scores must be finite and sorted in descending order")]
    UnsortedScores,
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = UncertaintyError> = std::result::Result<T, E>;

/// Clarifying-question level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    /// High text ambiguity: ask an open-ended question.
    #[serde(rename = "open_ended")]
    Level0,
    /// Clear text, indistinct mapping: ask a question that separates the top
    /// candidates.
    #[serde(rename = "distinguishing")]
    Level1,
    /// Low uncertainty: ask for enrichment.
    #[serde(rename = "enrichment")]
    Level2,
}

impl Level {
    pub fn index(self) -> u8 {
        match self {
            Level::Level0 => 0,
            Level::Level1 => 1,
            Level::Level2 => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Level::Level0 => "open_ended",
            Level::Level1 => "distinguishing",
            Level::Level2 => "enrichment",
        }
    }
}

/// Level0 iff `tas > alpha`; else Level1 iff `mus > beta`; else Level2.
pub fn classify_level(tas: f64, mus: f64, alpha: f64, beta: f64) -> Level {
    if tas > alpha {
        Level::Level0
    } else if mus > beta {
        Level::Level1
    } else {
        Level::Level2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub tas: f64,
    pub mus: f64,
    pub se_raw: f64,
    pub level: Level,
    pub round: usize,
}

/// Result of grouping a caption neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// Cluster index per caption, numbered in order of first appearance when
    /// captions are visited by descending similarity.
    pub labels: Vec<usize>,
    pub count: usize,
    /// Per-cluster sum of similarities clamped at zero.
    pub mass: Vec<f64>,
}

/// Single-linkage clustering over the graph whose edges join captions with
/// pairwise cosine `>= tau`.
pub fn cluster_neighborhood(
    embeddings: &[Embedding],
    similarities: &[f64],
    tau: f64,
) -> Result<ClusterAssignment> {
    if embeddings.is_empty() || similarities.is_empty() {
        return Err(UncertaintyError::EmptyInput);
    }
    if embeddings.len() != similarities.len() {
        return Err(UncertaintyError::LengthMismatch(
            embeddings.len(),
            similarities.len(),
        ));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(UncertaintyError::InvalidThreshold(tau));
    }
    let n = embeddings.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| similarities[b].total_cmp(&similarities[a]).then(a.cmp(&b)));

    let mut parent: Vec<usize> = (0..n).collect();
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            if cosine(&embeddings[i], &embeddings[j])? >= tau {
                union(&mut parent, i, j);
            }
        }
    }

    let mut root_label = vec![usize::MAX; n];
    let mut labels = vec![0; n];
    let mut mass = Vec::new();
    for &i in &order {
        let root = find(&mut parent, i);
        if root_label[root] == usize::MAX {
            root_label[root] = mass.len();
            mass.push(0.0);
        }
        let label = root_label[root];
        labels[i] = label;
        mass[label] += similarities[i].max(0.0);
    }
    Ok(ClusterAssignment {
        labels,
        count: mass.len(),
        mass,
    })
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // Keep the smaller index as root so the structure is order-independent.
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Top-K caption neighbors of a query: their similarities and embeddings.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    pub similarities: Vec<f64>,
    pub embeddings: Vec<Embedding>,
}

impl Neighborhood {
    /// The first `k` entries of `ranking`, with embeddings read from `index`.
    pub fn from_ranking(index: &EmbeddingIndex, ranking: &SimilarityList, k: usize) -> Result<Self> {
        let hits = &ranking.entries()[..k.min(ranking.len())];
        let embeddings = hits
            .iter()
            .map(|h| index.embedding(&h.id))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            similarities: hits.iter().map(|h| h.score).collect(),
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.similarities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.similarities.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEntropy {
    pub se: f64,
    pub clusters: ClusterAssignment,
    /// `p(c_j | x)` per cluster.
    pub distribution: Vec<f64>,
}

/// `-Σ p ln p` with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

pub fn semantic_entropy(neighborhood: &Neighborhood, tau: f64) -> Result<SemanticEntropy> {
    let clusters = cluster_neighborhood(&neighborhood.embeddings, &neighborhood.similarities, tau)?;
    let total: f64 = clusters.mass.iter().sum();
    if total <= 0.0 {
        return Err(UncertaintyError::DegenerateMass {
            k: neighborhood.len(),
        });
    }
    let distribution: Vec<f64> = clusters.mass.iter().map(|m| m / total).collect();
    let se = shannon_entropy(&distribution).max(0.0);
    Ok(SemanticEntropy {
        se,
        clusters,
        distribution,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TasConfig {
    /// Strength of the long-query damping.
    pub gamma: f64,
    /// Token count above which damping starts.
    pub t0: f64,
    pub complexity_adjustment: bool,
}

impl Default for TasConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            t0: 8.0,
            complexity_adjustment: true,
        }
    }
}

impl TasConfig {
    /// `1 / (1 + gamma * max(0, w - t0) / t0)` with `w` the whitespace token
    /// count; 1 when the adjustment is disabled.
    pub fn complexity_factor(&self, query_text: &str) -> f64 {
        if !self.complexity_adjustment {
            return 1.0;
        }
        let w = query_text.split_whitespace().count() as f64;
        1.0 / (1.0 + self.gamma * (w - self.t0).max(0.0) / self.t0)
    }
}

/// Normalized text ambiguity score in `[0, 1]`.
pub fn tas(se: f64, k: usize, query_text: &str, config: &TasConfig) -> f64 {
    if k <= 1 {
        return 0.0;
    }
    let ratio = se / (k as f64).ln();
    (ratio * config.complexity_factor(query_text)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingDistribution {
    pub probs: Vec<f64>,
    pub fallback_used: bool,
}

/// `p_i = max(s_i - mean, 0)^2 / Σ_j max(s_j - mean, 0)^2`, uniform when no
/// score exceeds the mean.
pub fn mapping_distribution(scores: &[f64]) -> Result<MappingDistribution> {
    let k = scores.len();
    if k < 2 {
        return Err(UncertaintyError::TooFewScores(k));
    }
    if scores.iter().any(|s| !s.is_finite()) || scores.windows(2).any(|w| w[0] < w[1]) {
        return Err(UncertaintyError::UnsortedScores);
    }
    // Work with offsets from the minimum: identical scores then give exactly
    // zero excess, and the mean is still the arithmetic mean.
    let min = scores[k - 1];
    let deltas: Vec<f64> = scores.iter().map(|s| s - min).collect();
    let mean = deltas.iter().sum::<f64>() / k as f64;
    let sq: Vec<f64> = deltas
        .iter()
        .map(|d| {
            let e = (d - mean).max(0.0);
            e * e
        })
        .collect();
    let denom: f64 = sq.iter().sum();
    if denom <= 0.0 {
        return Ok(MappingDistribution {
            probs: vec![1.0 / k as f64; k],
            fallback_used: true,
        });
    }
    Ok(MappingDistribution {
        probs: sq.iter().map(|x| x / denom).collect(),
        fallback_used: false,
    })
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(UncertaintyError::NotADistribution(
            "entries must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(UncertaintyError::NotADistribution(format!("sums to {sum}")));
    }
    Ok(())
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats, in `[0, ln 2]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(UncertaintyError::LengthMismatch(p.len(), q.len()));
    }
    if p.is_empty() {
        return Err(UncertaintyError::EmptyInput);
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let jsd = 0.5 * kl_to_mixture(p, &m) + 0.5 * kl_to_mixture(q, &m);
    Ok(jsd.clamp(0.0, LN_2))
}

fn one_hot(k: usize) -> Vec<f64> {
    let mut q = vec![0.0; k];
    q[0] = 1.0;
    q
}

/// MUS of an already-built distribution over ranked candidates.
pub fn mus_of_distribution(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(UncertaintyError::EmptyInput);
    }
    Ok((js_divergence(p, &one_hot(p.len()))? / LN_2).clamp(0.0, 1.0))
}

/// Mapping uncertainty of top-k scores sorted descending.
pub fn mus(scores: &[f64]) -> Result<f64> {
    mus_of_distribution(&mapping_distribution(scores)?.probs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyConfig {
    /// Caption neighbors used for TAS.
    pub k_tas: usize,
    /// Scores used for MUS.
    pub k_mus: usize,
    /// Cosine threshold for caption clustering.
    pub tau: f64,
    pub tas: TasConfig,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            k_tas: 20,
            k_mus: 10,
            tau: 0.85,
            tas: TasConfig::default(),
        }
    }
}

/// Both scores for a query whose full ranking is already computed.
///
/// A neighborhood with no positive similarity counts as maximally ambiguous
/// (`se = ln K`, TAS = 1). Fewer than two candidates counts as a certain
/// mapping (MUS = 0).
pub fn assess(
    index: &EmbeddingIndex,
    ranking: &SimilarityList,
    query_text: &str,
    config: &UncertaintyConfig,
    alpha: f64,
    beta: f64,
    round: usize,
) -> Result<UncertaintyReport> {
    let neighborhood = Neighborhood::from_ranking(index, ranking, config.k_tas)?;
    if neighborhood.is_empty() {
        return Err(UncertaintyError::EmptyInput);
    }
    let k = neighborhood.len();
    let (se, tas_value) = match semantic_entropy(&neighborhood, config.tau) {
        Ok(s) => (s.se, tas(s.se, k, query_text, &config.tas)),
        Err(UncertaintyError::DegenerateMass { .. }) => ((k as f64).ln(), 1.0),
        Err(e) => return Err(e),
    };

    let scores: Vec<f64> = ranking
        .entries()
        .iter()
        .take(config.k_mus)
        .map(|s| s.score)
        .collect();
    let mus_value = if scores.len() < 2 { 0.0 } else { mus(&scores)? };

    Ok(UncertaintyReport {
        tas: tas_value,
        mus: mus_value,
        se_raw: se,
        level: classify_level(tas_value, mus_value, alpha, beta),
        round,
    })
}
