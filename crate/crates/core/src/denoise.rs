//! Neighbor denoising: coarse-label, reciprocal and rank-statistic filters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DnaError, Result};
use crate::eval::NeighborAuditor;
use crate::linalg::Matrix;
use crate::membank::FeatureBank;

/// Indices of the `m` largest embedding coordinates, stored sorted so that
/// equality is set equality.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RankSet(Vec<usize>);

impl RankSet {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}

/// Top-`m_rank` coordinate indices of `v`, by signed value (or by absolute
/// value when `by_abs`), ties to the lower index.
pub fn rank_set(v: &[f64], m_rank: usize, by_abs: bool) -> Result<RankSet> {
    if m_rank == 0 || m_rank > v.len() {
        return Err(DnaError::Structural(format!(
            "rank dimension {m_rank} must lie in [1, {}]",
            v.len()
        )));
    }
    let key = |x: f64| if by_abs { x.abs() } else { x };
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let cmp = |&a: &usize, &b: &usize| key(v[b]).total_cmp(&key(v[a])).then(a.cmp(&b));
    if m_rank < idx.len() {
        idx.select_nth_unstable_by(m_rank - 1, cmp);
        idx.truncate(m_rank);
    }
    idx.sort_unstable();
    Ok(RankSet(idx))
}

/// Keep neighbors whose coarse label equals the query's, in order.
pub fn label_filter(neighbors: &[usize], query_coarse: usize, bank_labels: &[usize]) -> Vec<usize> {
    neighbors
        .iter()
        .copied()
        .filter(|&j| bank_labels[j] == query_coarse)
        .collect()
}

/// `R_i = { j ∈ A_i : i ∈ A_j }` for every query `i`.
pub fn reciprocal_filter(all: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let sorted: Vec<Vec<usize>> = all
        .iter()
        .map(|a| {
            let mut s = a.clone();
            s.sort_unstable();
            s
        })
        .collect();
    all.par_iter()
        .enumerate()
        .map(|(i, a)| {
            a.iter()
                .copied()
                .filter(|&j| sorted.get(j).is_some_and(|aj| aj.binary_search(&i).is_ok()))
                .collect()
        })
        .collect()
}

/// Keep neighbors whose bank rank set equals the query's.
pub fn rank_filter(
    neighbors: &[usize],
    query_rank: &RankSet,
    bank_ranks: &[RankSet],
) -> Vec<usize> {
    neighbors
        .iter()
        .copied()
        .filter(|&j| &bank_ranks[j] == query_rank)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveMode {
    /// Only the first surviving neighbor is a positive.
    Single,
    /// Every surviving neighbor is a positive.
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub use_label: bool,
    pub use_reciprocal: bool,
    /// Epochs (from 0) during which the rank filter runs.
    pub rank_epochs: usize,
    pub m_rank: usize,
    pub rank_by_abs: bool,
    pub positives: PositiveMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            use_label: true,
            use_reciprocal: true,
            rank_epochs: 1,
            m_rank: 5,
            rank_by_abs: false,
            positives: PositiveMode::Multi,
        }
    }
}

/// Per-query neighbor lists after each stage. `selected` are the positives.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSets {
    pub raw: Vec<Vec<usize>>,
    pub label: Vec<Vec<usize>>,
    pub reciprocal: Vec<Vec<usize>>,
    pub selected: Vec<Vec<usize>>,
}

impl NeighborSets {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn stages(&self) -> [(Stage, &Vec<Vec<usize>>); 4] {
        [
            (Stage::Raw, &self.raw),
            (Stage::Label, &self.label),
            (Stage::Reciprocal, &self.reciprocal),
            (Stage::Selected, &self.selected),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Label,
    Reciprocal,
    Selected,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Label => "label",
            Stage::Reciprocal => "reciprocal",
            Stage::Selected => "selected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAudit {
    pub stage: Stage,
    pub mean_size: f64,
    /// Fine-label agreement of (query, neighbor) pairs; diagnostic only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fine_accuracy: Option<f64>,
}

pub fn mean_size(sets: &[Vec<usize>]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    sets.iter().map(Vec::len).sum::<usize>() as f64 / sets.len() as f64
}

pub fn audit(sets: &NeighborSets, auditor: Option<&NeighborAuditor>) -> Vec<StageAudit> {
    sets.stages()
        .iter()
        .map(|(stage, s)| StageAudit {
            stage: *stage,
            mean_size: mean_size(s),
            fine_accuracy: auditor.and_then(|a| a.accuracy(s).ok()),
        })
        .collect()
}

/// Run the filter pipeline over raw top-k lists.
///
/// `queries` holds the current query embeddings (row `i` ↔ bank row `i`);
/// it is only read when the rank filter is active this epoch.
pub fn refine_all(
    bank: &mut FeatureBank,
    queries: &Matrix,
    raw: Vec<Vec<usize>>,
    epoch: usize,
    config: &FilterConfig,
) -> Result<NeighborSets> {
    if raw.len() != bank.len() || queries.rows() != bank.len() {
        return Err(DnaError::Structural(format!(
            "refine needs one raw list and query per bank row ({} lists, {} queries, {} rows)",
            raw.len(),
            queries.rows(),
            bank.len()
        )));
    }
    let labels = bank.coarse_labels().to_vec();
    let label: Vec<Vec<usize>> = if config.use_label {
        raw.par_iter()
            .enumerate()
            .map(|(i, n)| label_filter(n, labels[i], &labels))
            .collect()
    } else {
        raw.clone()
    };
    let reciprocal = if config.use_reciprocal {
        reciprocal_filter(&label)
    } else {
        label.clone()
    };
    let mut selected = if epoch < config.rank_epochs {
        let m = config.m_rank;
        let by_abs = config.rank_by_abs;
        let bank_ranks = bank.rank_sets(m, by_abs)?;
        reciprocal
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                Ok(rank_filter(
                    r,
                    &rank_set(queries.row(i), m, by_abs)?,
                    bank_ranks,
                ))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        reciprocal.clone()
    };
    if config.positives == PositiveMode::Single {
        selected.iter_mut().for_each(|s| s.truncate(1));
    }
    Ok(NeighborSets {
        raw,
        label,
        reciprocal,
        selected,
    })
}
