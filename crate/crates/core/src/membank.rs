//! Feature bank of momentum-encoder keys, one row per training sample, and
//! exact cosine top-k retrieval.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::checkpoint::TensorDump;
use crate::denoise::{rank_set, RankSet};
use crate::encoder::{embed, ParameterSet};
use crate::error::{DnaError, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::synthdata::TrainSplit;

/// Rows per forward chunk when encoding a whole split.
const ENCODE_CHUNK: usize = 256;

/// Unit-norm tolerance for bank rows.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    keys: Matrix,
    coarse_labels: Vec<usize>,
    version: u64,
    rank_cache: Option<RankCache>,
}

#[derive(Debug, Clone, PartialEq)]
struct RankCache {
    version: u64,
    m_rank: usize,
    by_abs: bool,
    sets: Vec<RankSet>,
}

/// Encode every row of `inputs` in fixed-size chunks.
pub fn encode_all(params: &ParameterSet, inputs: &Matrix) -> Result<Matrix> {
    let (n, _) = inputs.shape();
    let mut out = Matrix::zeros(n, params.embed_dim());
    let mut start = 0;
    while start < n {
        let end = (start + ENCODE_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let e = embed(params, &inputs.select_rows(&idx))?;
        for (o, r) in (start..end).zip(e.iter_rows()) {
            out.row_mut(o).copy_from_slice(r);
        }
        start = end;
    }
    Ok(out)
}

impl FeatureBank {
    pub fn new(keys: Matrix, coarse_labels: Vec<usize>) -> Result<Self> {
        if keys.rows() != coarse_labels.len() {
            return Err(DnaError::Structural(format!(
                "{} bank keys but {} coarse labels",
                keys.rows(),
                coarse_labels.len()
            )));
        }
        for (i, r) in keys.iter_rows().enumerate() {
            check_unit(i, r)?;
        }
        Ok(FeatureBank {
            keys,
            coarse_labels,
            version: 0,
            rank_cache: None,
        })
    }

    /// One forward pass of the momentum encoder over the train split; row `i`
    /// holds sample `i`.
    pub fn init(train: &TrainSplit, momentum: &ParameterSet) -> Result<Self> {
        let keys = encode_all(momentum, &train.inputs)?;
        FeatureBank::new(keys, train.coarse.clone())
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn key(&self, i: usize) -> &[f64] {
        self.keys.row(i)
    }

    pub fn coarse_labels(&self) -> &[usize] {
        &self.coarse_labels
    }

    /// Replace rows `ids` with `new_keys` and bump the version.
    pub fn update(&mut self, ids: &[usize], new_keys: &Matrix) -> Result<()> {
        if ids.len() != new_keys.rows() || new_keys.cols() != self.dim() {
            return Err(DnaError::Structural(format!(
                "update of {} ids with a {}x{} key block (bank dim {})",
                ids.len(),
                new_keys.rows(),
                new_keys.cols(),
                self.dim()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.len()) {
            return Err(DnaError::Structural(format!(
                "bank id {bad} out of range [0, {})",
                self.len()
            )));
        }
        for (&i, r) in ids.iter().zip(new_keys.iter_rows()) {
            check_unit(i, r)?;
        }
        for (&i, r) in ids.iter().zip(new_keys.iter_rows()) {
            self.keys.row_mut(i).copy_from_slice(r);
        }
        self.version += 1;
        Ok(())
    }

    /// Rank sets of every row, recomputed only when the bank changed since the
    /// last call (or the rank settings differ).
    pub fn rank_sets(&mut self, m_rank: usize, by_abs: bool) -> Result<&[RankSet]> {
        let fresh = matches!(&self.rank_cache,
            Some(c) if c.version == self.version && c.m_rank == m_rank && c.by_abs == by_abs);
        if !fresh {
            let sets = self
                .keys
                .iter_rows()
                .map(|r| rank_set(r, m_rank, by_abs))
                .collect::<Result<Vec<_>>>()?;
            self.rank_cache = Some(RankCache {
                version: self.version,
                m_rank,
                by_abs,
                sets,
            });
        }
        Ok(&self.rank_cache.as_ref().expect("just filled").sets)
    }

    pub fn to_dump(&self) -> TensorDump {
        let mut d = TensorDump::new();
        d.set_meta("kind", "bank");
        d.set_meta("version", self.version);
        d.push("bank.keys", self.keys.clone());
        let labels = self.coarse_labels.iter().map(|&c| c as f64).collect();
        d.push(
            "bank.coarse",
            Matrix::from_vec(1, self.coarse_labels.len(), labels).expect("1 x n"),
        );
        d
    }

    pub fn from_dump(d: &TensorDump) -> Result<Self> {
        let keys = d
            .get("bank.keys")
            .ok_or_else(|| DnaError::Structural("dump has no `bank.keys`".into()))?
            .clone();
        let coarse = d
            .get("bank.coarse")
            .ok_or_else(|| DnaError::Structural("dump has no `bank.coarse`".into()))?
            .as_slice()
            .iter()
            .map(|&v| v as usize)
            .collect();
        let mut bank = FeatureBank::new(keys, coarse)?;
        bank.version = d.meta("version").and_then(|v| v.parse().ok()).unwrap_or(0);
        Ok(bank)
    }
}

fn check_unit(i: usize, r: &[f64]) -> Result<()> {
    let n = norm(r);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(DnaError::Numeric(format!(
            "bank row {i} has norm {n}, expected 1"
        )));
    }
    Ok(())
}

pub fn cosine_sim(q: &[f64], h: &[f64]) -> Result<f64> {
    if q.len() != h.len() {
        return Err(DnaError::Structural(format!(
            "cosine of vectors with lengths {} and {}",
            q.len(),
            h.len()
        )));
    }
    let (nq, nh) = (norm(q), norm(h));
    if nq == 0.0 || nh == 0.0 {
        return Err(DnaError::Numeric(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((dot(q, h) / (nq * nh)).clamp(-1.0, 1.0))
}

/// Descending similarity, ascending index on ties.
fn by_sim_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub indices: Vec<usize>,
    /// Set when the requested `k` exceeded the number of candidates.
    pub clamped_to: Option<usize>,
}

/// Indices of the `k` bank rows most similar to `q`, excluding `query_id`.
///
/// Bank rows are unit norm, so ranking by `qᵀh` equals ranking by cosine.
pub fn topk_neighbors(
    bank: &FeatureBank,
    query_id: Option<usize>,
    q: &[f64],
    k: usize,
) -> Result<TopK> {
    if k == 0 {
        return Err(DnaError::Config("k must be >= 1".into()));
    }
    if bank.is_empty() {
        return Err(DnaError::Structural("retrieval from an empty bank".into()));
    }
    if q.len() != bank.dim() {
        return Err(DnaError::Structural(format!(
            "query dim {} does not match bank dim {}",
            q.len(),
            bank.dim()
        )));
    }
    let mut cands: Vec<(f64, usize)> = bank
        .keys
        .iter_rows()
        .enumerate()
        .filter(|(j, _)| Some(*j) != query_id)
        .map(|(j, h)| (dot(q, h), j))
        .collect();
    let available = cands.len();
    let (k, clamped_to) = if k > available {
        (available, Some(available))
    } else {
        (k, None)
    };
    if k == 0 {
        return Ok(TopK {
            indices: Vec::new(),
            clamped_to,
        });
    }
    if k < cands.len() {
        cands.select_nth_unstable_by(k - 1, by_sim_then_index);
        cands.truncate(k);
    }
    cands.sort_unstable_by(by_sim_then_index);
    Ok(TopK {
        indices: cands.into_iter().map(|(_, j)| j).collect(),
        clamped_to,
    })
}

/// Top-k for every query row `i` (excluding bank row `i`), in parallel over
/// queries against the frozen bank.
pub fn topk_all(
    bank: &FeatureBank,
    queries: &Matrix,
    k: usize,
) -> Result<(Vec<Vec<usize>>, Option<usize>)> {
    let results = (0..queries.rows())
        .into_par_iter()
        .map(|i| topk_neighbors(bank, Some(i), queries.row(i), k))
        .collect::<Result<Vec<_>>>()?;
    let clamped = results.iter().find_map(|t| t.clamped_to);
    Ok((results.into_iter().map(|t| t.indices).collect(), clamped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        let mut m = Matrix::zeros(n, d);
        for i in 0..n {
            let r = m.row_mut(i);
            r.iter_mut().for_each(|v| *v = rng.normal());
            let nr = norm(r);
            r.iter_mut().for_each(|v| *v /= nr);
        }
        m
    }

    fn basis_bank() -> FeatureBank {
        let keys = Matrix::from_vec(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        FeatureBank::new(keys, vec![0, 0, 0]).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[3.0, -4.0], &[3.0, -4.0]).unwrap() - 1.0).abs() < 1e-15);
        let s = 0.5f64.sqrt();
        assert!(
            (cosine_sim(&[s, s], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs()
                < 1e-8
        );
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(DnaError::Numeric(_))
        ));
    }

    #[test]
    fn ties_break_by_index() {
        let bank = basis_bank();
        let t = topk_neighbors(&bank, Some(0), &[1.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(t.indices, vec![1, 2]);
        assert_eq!(t.clamped_to, None);
    }

    #[test]
    fn exact_match_is_nearest() {
        let bank = basis_bank();
        let t = topk_neighbors(&bank, None, &[0.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(t.indices, vec![1]);
    }

    #[test]
    fn k_is_clamped() {
        let bank = basis_bank();
        let t = topk_neighbors(&bank, Some(1), &[0.0, 1.0, 0.0], 10).unwrap();
        assert_eq!(t.indices.len(), 2);
        assert_eq!(t.clamped_to, Some(2));
        assert!(!t.indices.contains(&1));
    }

    #[test]
    fn matches_full_sort_oracle() {
        let keys = unit_rows(50, 8, 21);
        let bank = FeatureBank::new(keys.clone(), vec![0; 50]).unwrap();
        for qi in 0..50 {
            let q = keys.row(qi);
            let mut all: Vec<(f64, usize)> = (0..50)
                .filter(|&j| j != qi)
                .map(|j| (dot(q, keys.row(j)), j))
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all.iter().take(7).map(|p| p.1).collect();
            assert_eq!(topk_neighbors(&bank, Some(qi), q, 7).unwrap().indices, want);
        }
    }

    #[test]
    fn update_replaces_rows_and_bumps_version() {
        let mut bank = basis_bank();
        let newk = Matrix::from_vec(1, 3, vec![0.0, 0.6, 0.8]).unwrap();
        bank.update(&[2], &newk).unwrap();
        assert_eq!(bank.key(2), &[0.0, 0.6, 0.8]);
        assert_eq!(bank.key(0), &[1.0, 0.0, 0.0]);
        assert_eq!(bank.version(), 1);

        let before = bank.clone();
        bank.update(&[2], &newk).unwrap();
        assert_eq!(bank.keys(), before.keys());
        assert_eq!(bank.version(), 2);

        assert!(matches!(
            bank.update(&[3], &newk),
            Err(DnaError::Structural(_))
        ));
        assert_eq!(bank.version(), 2);
    }

    #[test]
    fn rank_cache_follows_version() {
        let mut bank = basis_bank();
        assert_eq!(bank.rank_sets(1, false).unwrap()[2].indices(), &[2]);
        let newk = Matrix::from_vec(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        bank.update(&[2], &newk).unwrap();
        assert_eq!(bank.rank_sets(1, false).unwrap()[2].indices(), &[0]);
    }

    #[test]
    fn dump_round_trip() {
        let bank = FeatureBank::new(unit_rows(6, 4, 2), vec![0, 1, 0, 1, 1, 0]).unwrap();
        let back =
            FeatureBank::from_dump(&TensorDump::parse(&bank.to_dump().to_text()).unwrap()).unwrap();
        assert_eq!(back.keys(), bank.keys());
        assert_eq!(back.coarse_labels(), bank.coarse_labels());
    }
}
