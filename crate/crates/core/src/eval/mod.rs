//! Clustering evaluation against hidden fine labels.
//!
//! This is the only module that reads fine labels. Training code receives an
//! optional [`NeighborAuditor`] for diagnostics, which reports accuracies but
//! never exposes the labels themselves.

pub mod kmeans;
pub mod metrics;

pub use kmeans::{kmeans, KMeansFit, DEFAULT_RESTARTS};
pub use metrics::{ari, hungarian_acc, min_cost_assignment, nmi};

use serde::{Deserialize, Serialize};

use crate::encoder::ParameterSet;
use crate::error::{DnaError, Result};
use crate::linalg::Matrix;
use crate::membank::{encode_all, topk_all, FeatureBank};
use crate::rng::{derive_seed, name_tag};
use crate::synthdata::{Dataset, FineLabels, Split};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignments: Vec<usize>,
    pub num_clusters: usize,
}

impl Partition {
    /// Cluster count is taken as `max id + 1`.
    pub fn new(assignments: Vec<usize>) -> Self {
        let num_clusters = assignments.iter().max().map_or(0, |m| m + 1);
        Partition {
            assignments,
            num_clusters,
        }
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

impl From<&FineLabels> for Partition {
    fn from(f: &FineLabels) -> Self {
        Partition {
            assignments: f.labels.clone(),
            num_clusters: f.num_fine,
        }
    }
}

/// Fraction of (query, neighbor) pairs that share a fine label, pooled over
/// all pairs. Queries with empty lists contribute nothing.
pub fn neighbor_accuracy(sets: &[Vec<usize>], fine: &FineLabels) -> Result<f64> {
    if sets.len() > fine.len() {
        return Err(DnaError::Structural(format!(
            "{} neighbor lists but only {} labels",
            sets.len(),
            fine.len()
        )));
    }
    let mut pairs = 0usize;
    let mut hits = 0usize;
    for (i, s) in sets.iter().enumerate() {
        for &j in s {
            let lj = fine.labels.get(j).ok_or_else(|| {
                DnaError::Structural(format!("neighbor index {j} has no fine label"))
            })?;
            pairs += 1;
            hits += usize::from(*lj == fine.labels[i]);
        }
    }
    if pairs == 0 {
        return Err(DnaError::Structural(
            "neighbor accuracy is undefined when every set is empty".into(),
        ));
    }
    Ok(hits as f64 / pairs as f64)
}

/// Diagnostic-only access to train-split fine labels.
#[derive(Debug, Clone)]
pub struct NeighborAuditor {
    labels: FineLabels,
}

impl NeighborAuditor {
    pub fn new(labels: FineLabels) -> Self {
        NeighborAuditor { labels }
    }

    pub fn accuracy(&self, sets: &[Vec<usize>]) -> Result<f64> {
        neighbor_accuracy(sets, &self.labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterScores {
    pub acc: f64,
    pub ari: f64,
    pub nmi: f64,
}

/// K-Means with `k` clusters on `embeddings`, scored against `truth`.
pub fn cluster_and_score(
    embeddings: &Matrix,
    truth: &FineLabels,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<ClusterScores> {
    if embeddings.rows() != truth.len() {
        return Err(DnaError::Structural(format!(
            "{} embeddings but {} labels",
            embeddings.rows(),
            truth.len()
        )));
    }
    let fit = kmeans(embeddings, k, seed, restarts)?;
    let truth = Partition::from(truth);
    Ok(ClusterScores {
        acc: hungarian_acc(&fit.partition, &truth)?,
        ari: ari(&fit.partition, &truth)?,
        nmi: nmi(&fit.partition, &truth)?,
    })
}

/// K-Means seed used when scoring embeddings produced under `seed`.
pub fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, name_tag("eval"))
}

/// Cluster scores and, when the split has at least two samples, exact
/// `k`-nearest-neighbor fine accuracy among the test embeddings.
pub fn evaluate_test_split(
    params: &ParameterSet,
    ds: &Dataset,
    seed: u64,
    k: usize,
    restarts: usize,
) -> Result<(ClusterScores, Option<f64>)> {
    if k < 1 {
        return Err(DnaError::Config("k must be >= 1".into()));
    }
    if ds.input_dim != params.input_dim() {
        return Err(DnaError::Structural(format!(
            "dataset dimension {} does not match the encoder's {}",
            ds.input_dim,
            params.input_dim()
        )));
    }
    let labels = ds
        .fine_labels(Split::Test)
        .filter(|l| !l.is_empty())
        .ok_or_else(|| {
            DnaError::Structural("evaluation needs fine labels on the test split".into())
        })?;
    let emb = encode_all(params, &ds.inputs(Split::Test))?;
    let scores = cluster_and_score(&emb, &labels, labels.num_fine(), eval_seed(seed), restarts)?;
    let neighbor_acc = if emb.rows() >= 2 {
        let coarse = ds.split(Split::Test).iter().map(|s| s.coarse).collect();
        let bank = FeatureBank::new(emb.clone(), coarse)?;
        let (sets, _) = topk_all(&bank, &emb, k)?;
        Some(neighbor_accuracy(&sets, &labels)?)
    } else {
        None
    };
    Ok((scores, neighbor_acc))
}

/// Round a fraction to a percentage with two decimals.
pub fn percent(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

/// Evaluation report; scores are percentages rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub ari: f64,
    pub nmi: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neighbor_acc: Option<f64>,
    pub k: usize,
    pub seed: u64,
    pub checkpoint_id: String,
}

impl EvalReport {
    pub fn new(
        scores: ClusterScores,
        neighbor_acc: Option<f64>,
        k: usize,
        seed: u64,
        checkpoint_id: String,
    ) -> Self {
        EvalReport {
            acc: percent(scores.acc),
            ari: percent(scores.ari),
            nmi: percent(scores.nmi),
            neighbor_acc: neighbor_acc.map(percent),
            k,
            seed,
            checkpoint_id,
        }
    }
}
