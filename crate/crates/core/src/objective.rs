//! Multi-positive contrastive loss over the feature bank, its
//! alignment/uniformity split, the neighbor-centroid clustering form of the
//! alignment term, and coarse cross-entropy.
//!
//! All gradients are taken with respect to the query embeddings only; bank
//! keys are read through `&Matrix` and treated as constants.

use serde::{Deserialize, Serialize};

use crate::error::{DnaError, Result};
use crate::linalg::{dot, log_sum_exp, softmax_into, sq_dist, Matrix};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub dna: f64,
    pub alignment: f64,
    pub uniformity: f64,
    pub ce: f64,
    pub skipped_queries: usize,
}

impl LossReport {
    pub fn combine(dna: &DnaLoss, ce: f64, lambda_ce: f64) -> Self {
        LossReport {
            total: dna.value + lambda_ce * ce,
            dna: dna.value,
            alignment: dna.alignment,
            uniformity: dna.uniformity,
            ce,
            skipped_queries: dna.skipped,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnaLoss {
    pub value: f64,
    pub alignment: f64,
    pub uniformity: f64,
    /// Queries with an empty positive set.
    pub skipped: usize,
    /// `dL/dq`, zero rows for skipped queries.
    pub grad: Matrix,
}

fn check_inputs(queries: &Matrix, positives: &[Vec<usize>], bank: &Matrix, tau: f64) -> Result<()> {
    if bank.rows() == 0 {
        return Err(DnaError::Structural(
            "contrastive loss over an empty bank".into(),
        ));
    }
    if tau <= 0.0 || !tau.is_finite() {
        return Err(DnaError::Config(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    if queries.rows() != positives.len() {
        return Err(DnaError::Structural(format!(
            "{} queries but {} positive sets",
            queries.rows(),
            positives.len()
        )));
    }
    if queries.cols() != bank.cols() {
        return Err(DnaError::Structural(format!(
            "query dim {} does not match bank dim {}",
            queries.cols(),
            bank.cols()
        )));
    }
    if let Some(bad) = positives.iter().flatten().find(|&&j| j >= bank.rows()) {
        return Err(DnaError::Structural(format!(
            "positive index {bad} outside the bank"
        )));
    }
    Ok(())
}

fn active_count(positives: &[Vec<usize>]) -> usize {
    positives.iter().filter(|s| !s.is_empty()).count()
}

fn scaled_logits(q: &[f64], bank: &Matrix, tau: f64, out: &mut [f64]) {
    for (o, h) in out.iter_mut().zip(bank.iter_rows()) {
        *o = dot(q, h) / tau;
    }
}

/// Multi-positive contrastive loss and its gradient with respect to the queries.
///
/// Per query `i` with nonempty positives `S_i`:
/// `ℓ_i = logsumexp_k(qᵢᵀh_k/τ) − mean_{j∈S_i}(qᵢᵀh_j/τ)`, and the loss is the
/// mean of `ℓ_i` over those queries. Queries with empty `S_i` are skipped.
pub fn dna_loss(
    queries: &Matrix,
    positives: &[Vec<usize>],
    bank: &Matrix,
    tau: f64,
) -> Result<DnaLoss> {
    check_inputs(queries, positives, bank, tau)?;
    let (b, d) = queries.shape();
    let active = active_count(positives);
    let mut grad = Matrix::zeros(b, d);
    if active == 0 {
        return Ok(DnaLoss {
            value: 0.0,
            alignment: 0.0,
            uniformity: 0.0,
            skipped: b,
            grad,
        });
    }
    let scale = 1.0 / active as f64;
    let n = bank.rows();
    let mut logits = vec![0.0; n];
    let mut probs = vec![0.0; n];
    let mut alignment = 0.0;
    let mut uniformity = 0.0;
    for (i, pos) in positives.iter().enumerate() {
        if pos.is_empty() {
            continue;
        }
        let q = queries.row(i);
        scaled_logits(q, bank, tau, &mut logits);
        let lse = log_sum_exp(&logits);
        let inv = 1.0 / pos.len() as f64;
        let pos_mean = pos.iter().map(|&j| logits[j]).sum::<f64>() * inv;
        alignment -= pos_mean;
        uniformity += lse;

        softmax_into(&logits, &mut probs);
        let g = grad.row_mut(i);
        for (p, h) in probs.iter().zip(bank.iter_rows()) {
            for (gi, &hi) in g.iter_mut().zip(h) {
                *gi += p * hi;
            }
        }
        for &j in pos {
            for (gi, &hi) in g.iter_mut().zip(bank.row(j)) {
                *gi -= inv * hi;
            }
        }
        g.iter_mut().for_each(|v| *v *= scale / tau);
    }
    alignment *= scale;
    uniformity *= scale;
    Ok(DnaLoss {
        value: alignment + uniformity,
        alignment,
        uniformity,
        skipped: b - active,
        grad,
    })
}

/// Alignment and uniformity parts of [`dna_loss`], computed on their own.
pub fn alignment_uniformity(
    queries: &Matrix,
    positives: &[Vec<usize>],
    bank: &Matrix,
    tau: f64,
) -> Result<(f64, f64)> {
    check_inputs(queries, positives, bank, tau)?;
    let active = active_count(positives);
    if active == 0 {
        return Ok((0.0, 0.0));
    }
    let mut logits = vec![0.0; bank.rows()];
    let (mut align, mut unif) = (0.0, 0.0);
    for (i, pos) in positives.iter().enumerate() {
        if pos.is_empty() {
            continue;
        }
        let q = queries.row(i);
        align -= pos.iter().map(|&j| dot(q, bank.row(j)) / tau).sum::<f64>() / pos.len() as f64;
        scaled_logits(q, bank, tau, &mut logits);
        unif += log_sum_exp(&logits);
    }
    Ok((align / active as f64, unif / active as f64))
}

/// Per-query mean of the positive keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub mu: Matrix,
    /// `false` where the positive set was empty (the row is zero).
    pub valid: Vec<bool>,
}

impl Centroids {
    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

pub fn neighbor_centroid(positives: &[Vec<usize>], bank: &Matrix) -> Centroids {
    let d = bank.cols();
    let mut mu = Matrix::zeros(positives.len(), d);
    let mut valid = vec![false; positives.len()];
    for (i, pos) in positives.iter().enumerate() {
        if pos.is_empty() {
            continue;
        }
        let row = mu.row_mut(i);
        for &j in pos {
            for (m, &h) in row.iter_mut().zip(bank.row(j)) {
                *m += h;
            }
        }
        let inv = 1.0 / pos.len() as f64;
        row.iter_mut().for_each(|m| *m *= inv);
        valid[i] = true;
    }
    Centroids { mu, valid }
}

/// `Σᵢ ‖qᵢ − μᵢ‖²` over valid centroid rows.
pub fn clustering_objective(queries: &Matrix, centroids: &Centroids) -> f64 {
    centroids
        .valid
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(i, _)| sq_dist(queries.row(i), centroids.mu.row(i)))
        .sum()
}

/// The alignment term rewritten through centroids:
/// `(1 / 2τB') Σᵢ (‖qᵢ − μᵢ‖² − 1 − ‖μᵢ‖²)`, which equals the alignment term
/// whenever every query has unit norm.
pub fn alignment_via_centroids(queries: &Matrix, centroids: &Centroids, tau: f64) -> f64 {
    let active = centroids.num_valid();
    if active == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (i, _) in centroids.valid.iter().enumerate().filter(|(_, &v)| v) {
        let mu = centroids.mu.row(i);
        acc += sq_dist(queries.row(i), mu) - 1.0 - dot(mu, mu);
    }
    acc / (2.0 * tau * active as f64)
}

/// The additive constant separating alignment from the scaled clustering
/// objective: `−(1 / 2τB') Σᵢ (1 + ‖μᵢ‖²)`.
pub fn clustering_constant(centroids: &Centroids, tau: f64) -> f64 {
    let active = centroids.num_valid();
    if active == 0 {
        return 0.0;
    }
    let s: f64 = centroids
        .valid
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(i, _)| 1.0 + dot(centroids.mu.row(i), centroids.mu.row(i)))
        .sum();
    -s / (2.0 * tau * active as f64)
}

/// Mean cross-entropy of the true labels and its gradient `(softmax − onehot)/B`.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, m) = logits.shape();
    if labels.len() != b {
        return Err(DnaError::Structural(format!(
            "{b} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= m) {
        return Err(DnaError::Structural(format!(
            "label {bad} out of range [0, {m})"
        )));
    }
    let mut grad = Matrix::zeros(b, m);
    if b == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    let inv = 1.0 / b as f64;
    for (r, &c) in labels.iter().enumerate() {
        let row = logits.row(r);
        loss += log_sum_exp(row) - row[c];
        let g = grad.row_mut(r);
        softmax_into(row, g);
        g[c] -= 1.0;
        g.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn unit(v: &mut [f64]) {
        let n = crate::linalg::norm(v);
        v.iter_mut().for_each(|x| *x /= n);
    }

    fn random_unit(rows: usize, d: usize, rng: &mut Rng) -> Matrix {
        let mut m = Matrix::zeros(rows, d);
        for i in 0..rows {
            let r = m.row_mut(i);
            r.iter_mut().for_each(|v| *v = rng.normal());
            unit(r);
        }
        m
    }

    fn random_sets(b: usize, n: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        (0..b)
            .map(|_| {
                let len = rng.below(4);
                (0..len).map(|_| rng.below(n)).collect()
            })
            .collect()
    }

    /// Literal evaluation: mean over positives of −log(exp(s_j)/Σ exp(s_k)).
    fn literal_loss(q: &Matrix, s: &[Vec<usize>], bank: &Matrix, tau: f64) -> f64 {
        let mut total = 0.0;
        let mut active = 0;
        for (i, pos) in s.iter().enumerate() {
            if pos.is_empty() {
                continue;
            }
            active += 1;
            let denom: f64 = bank
                .iter_rows()
                .map(|h| (dot(q.row(i), h) / tau).exp())
                .sum();
            let per: f64 = pos
                .iter()
                .map(|&j| -((dot(q.row(i), bank.row(j)) / tau).exp() / denom).ln())
                .sum();
            total += per / pos.len() as f64;
        }
        total / active as f64
    }

    #[test]
    fn single_key_bank_has_zero_loss() {
        let bank = Matrix::from_vec(1, 2, vec![0.6, 0.8]).unwrap();
        let q = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let l = dna_loss(&q, &[vec![0]], &bank, 0.07).unwrap();
        assert!(l.value.abs() < 1e-12);
    }

    #[test]
    fn orthogonal_negative_value() {
        let bank = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let q = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let l = dna_loss(&q, &[vec![0]], &bank, 0.07).unwrap();
        let want = (-1.0f64 / 0.07).exp().ln_1p();
        assert!((l.value - want).abs() < 1e-15, "{} vs {want}", l.value);
        assert!((l.value - 6.2e-7).abs() < 0.05e-7);
    }

    #[test]
    fn matches_literal_formula() {
        let mut rng = Rng::new(10);
        let bank = random_unit(20, 8, &mut rng);
        let q = random_unit(4, 8, &mut rng);
        let s = vec![vec![0, 3], vec![5], vec![], vec![1, 2, 19]];
        let l = dna_loss(&q, &s, &bank, 0.07).unwrap();
        assert!((l.value - literal_loss(&q, &s, &bank, 0.07)).abs() < 1e-10);
        assert_eq!(l.skipped, 1);
        assert!(l.grad.row(2).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = Rng::new(11);
        for trial in 0..5 {
            let bank = random_unit(20, 8, &mut rng);
            let q = random_unit(4, 8, &mut rng);
            let s: Vec<Vec<usize>> = (0..4)
                .map(|i| vec![(i * 3 + trial) % 20, (i + 7) % 20])
                .collect();
            let tau = 0.5;
            let l = dna_loss(&q, &s, &bank, tau).unwrap();
            let h = 1e-6;
            for i in 0..4 {
                for d in 0..8 {
                    let mut qp = q.clone();
                    let mut qm = q.clone();
                    qp.set(i, d, q.get(i, d) + h);
                    qm.set(i, d, q.get(i, d) - h);
                    let fd = (dna_loss(&qp, &s, &bank, tau).unwrap().value
                        - dna_loss(&qm, &s, &bank, tau).unwrap().value)
                        / (2.0 * h);
                    let an = l.grad.get(i, d);
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                    assert!(rel < 1e-6, "trial {trial} ({i},{d}): fd {fd} analytic {an}");
                }
            }
        }
    }

    #[test]
    fn all_empty_sets_skip_everything() {
        let bank = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let q = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = dna_loss(&q, &[vec![], vec![]], &bank, 0.07).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.skipped, 2);
        let empty = Matrix::zeros(0, 2);
        assert!(matches!(
            dna_loss(&q, &[vec![], vec![]], &empty, 0.07),
            Err(DnaError::Structural(_))
        ));
    }

    #[test]
    fn alignment_examples() {
        let bank = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let q = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let (a, _) = alignment_uniformity(&q, &[vec![0]], &bank, 0.07).unwrap();
        assert!((a + 1.0 / 0.07).abs() < 1e-12);
        let (a, _) = alignment_uniformity(&q, &[vec![1]], &bank, 0.07).unwrap();
        assert_eq!(a, 0.0);
    }

    #[test]
    fn decomposition_and_clustering_identity() {
        let mut rng = Rng::new(12);
        for _ in 0..50 {
            let bank = random_unit(15, 6, &mut rng);
            let q = random_unit(5, 6, &mut rng);
            let s = random_sets(5, 15, &mut rng);
            let l = dna_loss(&q, &s, &bank, 0.07).unwrap();
            let (a, u) = alignment_uniformity(&q, &s, &bank, 0.07).unwrap();
            assert!((l.value - (a + u)).abs() < 1e-9);
            let c = neighbor_centroid(&s, &bank);
            assert!((a - alignment_via_centroids(&q, &c, 0.07)).abs() < 1e-9);
            let active = c.num_valid().max(1) as f64;
            let scaled = clustering_objective(&q, &c) / (2.0 * 0.07 * active);
            assert!((a - (scaled + clustering_constant(&c, 0.07))).abs() < 1e-9);
        }
    }

    #[test]
    fn centroid_examples() {
        let bank = Matrix::from_vec(3, 2, vec![0.6, 0.8, -0.6, -0.8, 1.0, 0.0]).unwrap();
        let c = neighbor_centroid(&[vec![2], vec![0, 1], vec![]], &bank);
        assert_eq!(c.mu.row(0), bank.row(2));
        assert_eq!(c.mu.row(1), &[0.0, 0.0]);
        assert_eq!(c.valid, vec![true, true, false]);
    }

    #[test]
    fn clustering_objective_examples() {
        let q = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let same = Centroids {
            mu: q.clone(),
            valid: vec![true],
        };
        assert_eq!(clustering_objective(&q, &same), 0.0);
        let shifted = Centroids {
            mu: Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap(),
            valid: vec![true],
        };
        assert_eq!(clustering_objective(&q, &shifted), 1.0);
    }

    #[test]
    fn ce_examples() {
        let uniform = Matrix::zeros(2, 4);
        let (l, _) = ce_loss(&uniform, &[0, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let sharp = Matrix::from_vec(1, 3, vec![50.0, 0.0, 0.0]).unwrap();
        let (l50, _) = ce_loss(&sharp, &[0]).unwrap();
        let mild = Matrix::from_vec(1, 3, vec![5.0, 0.0, 0.0]).unwrap();
        let (l5, _) = ce_loss(&mild, &[0]).unwrap();
        assert!(l50 < l5 && l50 < 1e-20);
        assert!(matches!(
            ce_loss(&uniform, &[0, 4]),
            Err(DnaError::Structural(_))
        ));
    }

    #[test]
    fn ce_gradient_matches_central_differences() {
        let mut rng = Rng::new(13);
        let mut logits = Matrix::zeros(3, 4);
        logits
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = 2.0 * rng.normal());
        let labels = [1, 3, 0];
        let (_, g) = ce_loss(&logits, &labels).unwrap();
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..4 {
                let mut p = logits.clone();
                let mut m = logits.clone();
                p.set(r, c, logits.get(r, c) + h);
                m.set(r, c, logits.get(r, c) - h);
                let fd =
                    (ce_loss(&p, &labels).unwrap().0 - ce_loss(&m, &labels).unwrap().0) / (2.0 * h);
                let an = g.get(r, c);
                assert!(
                    (fd - an).abs() / fd.abs().max(an.abs()) < 1e-6,
                    "{fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn alignment_step_shrinks_centroid_distance() {
        let mut rng = Rng::new(14);
        let bank = random_unit(12, 5, &mut rng);
        let q = random_unit(4, 5, &mut rng);
        let s = vec![vec![0, 1], vec![2], vec![3, 4, 5], vec![6]];
        let c = neighbor_centroid(&s, &bank);
        let before = clustering_objective(&q, &c);
        // alignment gradient alone: −(1/(B'τ)) μ_i
        let tau = 0.07;
        let step = 1e-3;
        let mut moved = q.clone();
        for i in 0..4 {
            for (v, &m) in moved.row_mut(i).iter_mut().zip(c.mu.row(i)) {
                *v += step * m / (4.0 * tau);
            }
            // the identity with the clustering form only holds on the sphere
            unit(moved.row_mut(i));
        }
        assert!(clustering_objective(&moved, &c) <= before);
    }
}
