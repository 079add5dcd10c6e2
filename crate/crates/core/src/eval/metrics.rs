//! Partition agreement scores: Hungarian-matched accuracy, ARI and NMI.

use std::collections::HashMap;

use super::Partition;
use crate::error::{DnaError, Result};

fn check_lengths(pred: &Partition, truth: &Partition) -> Result<usize> {
    if pred.len() != truth.len() {
        return Err(DnaError::Structural(format!(
            "prediction has {} entries but truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(DnaError::Structural(
            "cannot score an empty partition".into(),
        ));
    }
    Ok(pred.len())
}

/// Dense contingency table `table[p][t]` plus marginals.
struct Contingency {
    table: Vec<Vec<u64>>,
    rows: Vec<u64>,
    cols: Vec<u64>,
    n: u64,
}

fn contingency(pred: &[usize], truth: &[usize]) -> Contingency {
    // compact label ids so arbitrary label values are accepted
    let mut pmap = HashMap::new();
    let mut tmap = HashMap::new();
    for &p in pred {
        let next = pmap.len();
        pmap.entry(p).or_insert(next);
    }
    for &t in truth {
        let next = tmap.len();
        tmap.entry(t).or_insert(next);
    }
    let mut table = vec![vec![0u64; tmap.len()]; pmap.len()];
    for (p, t) in pred.iter().zip(truth) {
        table[pmap[p]][tmap[t]] += 1;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..tmap.len())
        .map(|j| table.iter().map(|r| r[j]).sum())
        .collect();
    Contingency {
        table,
        rows,
        cols,
        n: pred.len() as u64,
    }
}

/// Minimum-cost perfect assignment on a square cost matrix (O(n³)
/// shortest augmenting path with potentials). Returns `col_of_row`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        if row_of_col[j] > 0 {
            col_of_row[row_of_col[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Fraction of samples correctly labeled under the best one-to-one mapping
/// of predicted clusters to true classes.
pub fn hungarian_acc(pred: &Partition, truth: &Partition) -> Result<f64> {
    let n = check_lengths(pred, truth)?;
    let c = contingency(&pred.assignments, &truth.assignments);
    let size = c.table.len().max(c.cols.len());
    let max = c.table.iter().flatten().copied().max().unwrap_or(0) as f64;
    let mut cost = vec![vec![max; size]; size];
    for (p, row) in c.table.iter().enumerate() {
        for (t, &w) in row.iter().enumerate() {
            cost[p][t] = max - w as f64;
        }
    }
    let assign = min_cost_assignment(&cost);
    let matched: u64 = assign
        .iter()
        .enumerate()
        .filter(|&(p, &t)| p < c.table.len() && t < c.cols.len())
        .map(|(p, &t)| c.table[p][t])
        .sum();
    Ok(matched as f64 / n as f64)
}

fn comb2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table.
///
/// When the expected index equals its maximum (both partitions trivial in
/// the same way), the score is 1 by convention.
pub fn ari(pred: &Partition, truth: &Partition) -> Result<f64> {
    check_lengths(pred, truth)?;
    let c = contingency(&pred.assignments, &truth.assignments);
    let index: f64 = c.table.iter().flatten().map(|&x| comb2(x)).sum();
    let a: f64 = c.rows.iter().map(|&x| comb2(x)).sum();
    let b: f64 = c.cols.iter().map(|&x| comb2(x)).sum();
    let total = comb2(c.n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = a * b / total;
    let max = 0.5 * (a + b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2 I(pred; truth) / (H(pred) + H(truth))`, natural log. Two trivial
/// partitions score 1.
pub fn nmi(pred: &Partition, truth: &Partition) -> Result<f64> {
    check_lengths(pred, truth)?;
    let c = contingency(&pred.assignments, &truth.assignments);
    let n = c.n as f64;
    let hp = entropy(&c.rows, n);
    let ht = entropy(&c.cols, n);
    if hp + ht == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (p, row) in c.table.iter().enumerate() {
        for (t, &x) in row.iter().enumerate() {
            if x == 0 {
                continue;
            }
            let x = x as f64;
            mi += x / n * (x * n / (c.rows[p] as f64 * c.cols[t] as f64)).ln();
        }
    }
    Ok((2.0 * mi / (hp + ht)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: &[usize]) -> Partition {
        Partition::new(v.to_vec())
    }

    #[test]
    fn acc_examples() {
        assert_eq!(
            hungarian_acc(&p(&[0, 0, 1, 1]), &p(&[1, 1, 0, 0])).unwrap(),
            1.0
        );
        assert_eq!(
            hungarian_acc(&p(&[0, 1, 0, 1]), &p(&[0, 0, 1, 1])).unwrap(),
            0.5
        );
        assert!(hungarian_acc(&p(&[0, 1]), &p(&[0])).is_err());
    }

    #[test]
    fn acc_with_more_clusters_than_classes() {
        // three predicted clusters, two classes: the best map covers 3 of 4
        let acc = hungarian_acc(&p(&[0, 1, 2, 2]), &p(&[0, 0, 1, 1])).unwrap();
        assert_eq!(acc, 0.75);
    }

    #[test]
    fn assignment_small_case() {
        let cost = vec![
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ];
        let a = min_cost_assignment(&cost);
        let total: f64 = a.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn ari_examples() {
        assert_eq!(ari(&p(&[0, 0, 1, 1]), &p(&[5, 5, 7, 7])).unwrap(), 1.0);
        assert_eq!(ari(&p(&[0, 0, 0, 0]), &p(&[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(ari(&p(&[0, 0, 0]), &p(&[1, 1, 1])).unwrap(), 1.0);
    }

    #[test]
    fn nmi_examples() {
        assert!((nmi(&p(&[0, 0, 1, 1]), &p(&[1, 1, 0, 0])).unwrap() - 1.0).abs() < 1e-12);
        // product design: every (pred, truth) pair occurs equally often
        let pred = p(&[0, 0, 1, 1, 0, 0, 1, 1]);
        let truth = p(&[0, 1, 0, 1, 0, 1, 0, 1]);
        assert!(nmi(&pred, &truth).unwrap().abs() < 1e-12);
        assert_eq!(nmi(&p(&[3, 3]), &p(&[1, 1])).unwrap(), 1.0);
    }
}
