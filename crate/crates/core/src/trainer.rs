//! Coarse-label pretraining and the alternating neighbor-refresh /
//! gradient-update training loop.
//!
//! The trainer only ever sees a [`TrainSplit`] (inputs and coarse labels).
//! Fine labels reach it solely through the optional [`NeighborAuditor`]
//! (diagnostic accuracies) and [`EvalSplit`] (test-split scoring), neither of
//! which feeds back into training state.

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorDump;
use crate::config::TrainConfig;
use crate::denoise::{audit, refine_all, NeighborSets, StageAudit};
use crate::encoder::{
    apply_gradients, backward, classify, embed, forward, momentum_update, AdamState, ParameterSet,
};
use crate::error::{DnaError, Result};
use crate::eval::{cluster_and_score, eval_seed, ClusterScores, NeighborAuditor};
use crate::linalg::Matrix;
use crate::membank::{encode_all, topk_all, FeatureBank};
use crate::objective::{
    alignment_via_centroids, ce_loss, dna_loss, neighbor_centroid, Centroids, LossReport,
};
use crate::rng::{derive_seed, name_tag, Rng};
use crate::synthdata::{FineLabels, TrainSplit};

/// Held-out inputs and fine labels used only for scoring.
#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub inputs: Matrix,
    pub labels: FineLabels,
}

impl EvalSplit {
    pub fn new(inputs: Matrix, labels: FineLabels) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(DnaError::Structural(format!(
                "{} eval inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(EvalSplit { inputs, labels })
    }

    /// K-Means on the normalized query embeddings with K = number of fine classes.
    pub fn score(
        &self,
        params: &ParameterSet,
        seed: u64,
        restarts: usize,
    ) -> Result<ClusterScores> {
        let emb = encode_all(params, &self.inputs)?;
        cluster_and_score(&emb, &self.labels, self.labels.num_fine(), seed, restarts)
    }
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(DnaError::Numeric(format!("{what} is not finite ({v})")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub ce: f64,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub params: ParameterSet,
    /// Seed the weights were initialized and shuffled with; evaluation
    /// K-Means seeds derive from it so runs sharing a pretraining are scored
    /// identically.
    pub seed: u64,
    pub history: Vec<PretrainEpoch>,
    /// Fraction of train samples whose coarse label is predicted correctly.
    pub coarse_train_acc: f64,
}

pub fn coarse_accuracy(params: &ParameterSet, train: &TrainSplit) -> Result<f64> {
    if train.coarse.is_empty() {
        return Err(DnaError::Structural("empty train split".into()));
    }
    let mut hits = 0usize;
    for (chunk, labels) in train
        .inputs
        .as_slice()
        .chunks(256 * train.inputs.cols())
        .zip(train.coarse.chunks(256))
    {
        let x = Matrix::from_vec(labels.len(), train.inputs.cols(), chunk.to_vec())?;
        let logits = classify(params, &forward(params, &x)?.features)?;
        for (row, &c) in logits.iter_rows().zip(labels) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            hits += usize::from(best == c);
        }
    }
    Ok(hits as f64 / train.coarse.len() as f64)
}

/// Train encoder and classifier with coarse cross-entropy only.
pub fn pretrain(train: &TrainSplit, cfg: &TrainConfig) -> Result<Pretrained> {
    cfg.validate()?;
    let n = train.inputs.rows();
    if n == 0 {
        return Err(DnaError::Structural(
            "pretraining needs a nonempty train split".into(),
        ));
    }
    let arch = cfg.architecture(train.inputs.cols(), train.num_coarse);
    let mut params = ParameterSet::init(&arch, derive_seed(cfg.seed, name_tag("init")));
    let mut optim = AdamState::new(&params);
    let ocfg = cfg.optim();
    let mut rng = Rng::new(derive_seed(cfg.seed, name_tag("pretrain")));
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for ids in batches(&order, cfg.batch_size) {
            let x = train.inputs.select_rows(ids);
            let labels: Vec<usize> = ids.iter().map(|&i| train.coarse[i]).collect();
            let fwd = forward(&params, &x)?;
            let logits = classify(&params, &fwd.features)?;
            let (ce, d_logits) = ce_loss(&logits, &labels)?;
            check_finite(&format!("pretraining loss at epoch {epoch}"), ce)?;
            let grads = backward(&params, &fwd, None, Some(&d_logits));
            apply_gradients(&mut params, &grads, &mut optim, &ocfg)?;
            total += ce * ids.len() as f64;
        }
        let ce = total / n as f64;
        debug!("pretrain epoch {epoch}: ce {ce:.6}");
        history.push(PretrainEpoch { epoch, ce });
    }
    let coarse_train_acc = coarse_accuracy(&params, train)?;
    info!(
        "pretraining done after {} epochs, coarse train accuracy {:.4}",
        cfg.pretrain_epochs, coarse_train_acc
    );
    Ok(Pretrained {
        params,
        seed: cfg.seed,
        history,
        coarse_train_acc,
    })
}

/// Everything the training loop mutates.
#[derive(Debug, Clone)]
pub struct RunState {
    pub params: ParameterSet,
    /// Only ever changed by [`momentum_update`].
    pub params_m: ParameterSet,
    pub optim: AdamState,
    pub bank: FeatureBank,
    pub epoch: usize,
    pub rng: Rng,
    pub history: Vec<EpochMetrics>,
}

impl RunState {
    /// Copy the pretrained weights into the momentum encoder and fill the bank.
    /// The optimizer state starts fresh.
    pub fn new(train: &TrainSplit, params: ParameterSet, cfg: &TrainConfig) -> Result<Self> {
        let params_m = params.clone();
        let bank = FeatureBank::init(train, &params_m)?;
        Ok(RunState {
            optim: AdamState::new(&params),
            params,
            params_m,
            bank,
            epoch: 0,
            rng: Rng::new(derive_seed(cfg.seed, name_tag("train"))),
            history: Vec::new(),
        })
    }

    /// Query, momentum and optimizer tensors plus the bank, with `meta`.
    pub fn to_dump(&self, cfg: &TrainConfig) -> TensorDump {
        let mut d = self.bank.to_dump();
        d.set_meta("kind", "run");
        d.set_meta("epoch", self.epoch);
        config_meta(&mut d, cfg);
        d.push_params("query", &self.params);
        d.push_params("momentum", &self.params_m);
        d.push_adam("adam", &self.optim);
        d
    }
}

/// Record the settings evaluation needs to reproduce a run's view.
pub fn config_meta(d: &mut TensorDump, cfg: &TrainConfig) {
    d.set_meta("k", cfg.k);
    d.set_meta("seed", cfg.seed);
    d.set_meta("eval_restarts", cfg.eval_restarts);
}

/// Pretrained-only checkpoint.
pub fn pretrain_dump(pre: &Pretrained, cfg: &TrainConfig) -> TensorDump {
    let mut d = TensorDump::new();
    d.set_meta("kind", "pretrain");
    d.set_meta("epoch", 0);
    config_meta(&mut d, cfg);
    d.set_meta("seed", pre.seed);
    d.push_params("query", &pre.params);
    d
}

#[derive(Debug, Clone)]
pub struct EStep {
    pub sets: NeighborSets,
    pub centroids: Centroids,
    pub audit: Vec<StageAudit>,
    /// Set when `k` exceeded `N − 1` and was clamped.
    pub clamped_to: Option<usize>,
}

/// Refresh every training sample's neighbor sets against the current bank.
pub fn e_step(
    state: &mut RunState,
    train: &TrainSplit,
    cfg: &TrainConfig,
    auditor: Option<&NeighborAuditor>,
) -> Result<EStep> {
    let queries = encode_all(&state.params, &train.inputs)?;
    let (raw, clamped_to) = topk_all(&state.bank, &queries, cfg.k)?;
    if let Some(k) = clamped_to {
        warn!(
            "k = {} exceeds the bank size minus one; clamped to {k}",
            cfg.k
        );
    }
    let sets = refine_all(&mut state.bank, &queries, raw, state.epoch, &cfg.filters())?;
    let centroids = neighbor_centroid(&sets.selected, state.bank.keys());
    let audit = audit(&sets, auditor);
    Ok(EStep {
        sets,
        centroids,
        audit,
        clamped_to,
    })
}

/// One gradient step on the samples `ids`. Returns `None` when the batch has
/// no active loss term (every positive set empty and no CE), in which case
/// nothing is modified.
pub fn train_batch(
    state: &mut RunState,
    train: &TrainSplit,
    positives: &[Vec<usize>],
    ids: &[usize],
    cfg: &TrainConfig,
) -> Result<Option<LossReport>> {
    let batch_pos: Vec<Vec<usize>> = ids.iter().map(|&i| positives[i].clone()).collect();
    let use_ce = cfg.lambda_ce > 0.0;
    if !use_ce && batch_pos.iter().all(Vec::is_empty) {
        return Ok(None);
    }
    let x = train.inputs.select_rows(ids);
    let fwd = forward(&state.params, &x)?;
    let dna = dna_loss(&fwd.embedding, &batch_pos, state.bank.keys(), cfg.tau)?;
    if cfg.check_identity {
        let mu = neighbor_centroid(&batch_pos, state.bank.keys());
        let via = alignment_via_centroids(&fwd.embedding, &mu, cfg.tau);
        let tol = 1e-9 * dna.alignment.abs().max(1.0);
        if (via - dna.alignment).abs() > tol {
            return Err(DnaError::Numeric(format!(
                "alignment {} differs from its centroid form {via}",
                dna.alignment
            )));
        }
    }
    let (ce, d_logits) = if use_ce {
        let labels: Vec<usize> = ids.iter().map(|&i| train.coarse[i]).collect();
        let logits = classify(&state.params, &fwd.features)?;
        let (ce, mut g) = ce_loss(&logits, &labels)?;
        g.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v *= cfg.lambda_ce);
        (ce, Some(g))
    } else {
        (0.0, None)
    };
    let report = LossReport::combine(&dna, ce, cfg.lambda_ce);
    check_finite(
        &format!("training loss at epoch {}", state.epoch),
        report.total,
    )?;
    let grads = backward(&state.params, &fwd, Some(&dna.grad), d_logits.as_ref());
    apply_gradients(&mut state.params, &grads, &mut state.optim, &cfg.optim())?;
    momentum_update(&mut state.params_m, &state.params, cfg.alpha)?;
    let keys = embed(&state.params_m, &x)?;
    state.bank.update(ids, &keys)?;
    Ok(Some(report))
}

/// Batch-mean losses over one pass of `order`.
pub fn m_step(
    state: &mut RunState,
    train: &TrainSplit,
    sets: &NeighborSets,
    order: &[usize],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let mut sum = LossReport::default();
    let mut count = 0usize;
    for ids in batches(order, cfg.batch_size) {
        if let Some(r) = train_batch(state, train, &sets.selected, ids, cfg)? {
            sum.total += r.total;
            sum.dna += r.dna;
            sum.alignment += r.alignment;
            sum.uniformity += r.uniformity;
            sum.ce += r.ce;
            count += 1;
        }
        sum.skipped_queries += ids.iter().filter(|&&i| sets.selected[i].is_empty()).count();
    }
    if count > 0 {
        let inv = 1.0 / count as f64;
        sum.total *= inv;
        sum.dna *= inv;
        sum.alignment *= inv;
        sum.uniformity *= inv;
        sum.ce *= inv;
    }
    Ok(sum)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: LossReport,
    /// Stage sizes and (diagnostic) accuracies from the epoch's first E-step.
    pub neighbor_audit: Vec<StageAudit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<ClusterScores>,
    pub bank_version: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl EpochMetrics {
    pub fn selected(&self) -> Option<&StageAudit> {
        self.neighbor_audit.last()
    }
}

/// Callbacks for persisting progress. Errors abort the run.
pub trait RunObserver {
    fn pretrained(&mut self, _pre: &Pretrained, _scores: Option<&ClusterScores>) -> Result<()> {
        Ok(())
    }
    fn epoch_done(&mut self, _metrics: &EpochMetrics, _state: &RunState) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub pretrain_eval: Option<ClusterScores>,
    pub coarse_train_acc: f64,
    pub state: RunState,
}

/// Inputs shared by every run on one dataset.
#[derive(Debug, Clone, Copy)]
pub struct RunData<'a> {
    pub train: &'a TrainSplit,
    pub eval: Option<&'a EvalSplit>,
    pub auditor: Option<&'a NeighborAuditor>,
}

/// Pretrain, then train.
pub fn run(
    cfg: &TrainConfig,
    data: RunData<'_>,
    observer: &mut dyn RunObserver,
) -> Result<RunOutcome> {
    let pre = pretrain(data.train, cfg)?;
    run_pretrained(cfg, data, &pre, observer)
}

/// The DNA training loop starting from pretrained weights.
pub fn run_pretrained(
    cfg: &TrainConfig,
    data: RunData<'_>,
    pre: &Pretrained,
    observer: &mut dyn RunObserver,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let eval_seed = eval_seed(pre.seed);
    let pretrain_eval = data
        .eval
        .map(|e| e.score(&pre.params, eval_seed, cfg.eval_restarts))
        .transpose()?;
    observer.pretrained(pre, pretrain_eval.as_ref())?;

    let train = data.train;
    let mut state = RunState::new(train, pre.params.clone(), cfg)?;
    let n = train.inputs.rows();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.train_epochs {
        state.epoch = epoch;
        state.rng.shuffle(&mut order);
        let mut loss = LossReport::default();
        let mut audit = Vec::new();
        let mut warnings = Vec::new();
        let chunk = n.div_ceil(cfg.esteps_per_epoch).max(1);
        for (part, slice) in order.chunks(chunk).enumerate() {
            let es = e_step(&mut state, train, cfg, data.auditor)?;
            if part == 0 {
                audit = es.audit.clone();
                if let Some(k) = es.clamped_to {
                    warnings.push(format!("k={} clamped to {k}", cfg.k));
                }
            }
            let r = m_step(&mut state, train, &es.sets, slice, cfg)?;
            // weight parts by their share of the epoch
            let w = slice.len() as f64 / n as f64;
            loss.total += w * r.total;
            loss.dna += w * r.dna;
            loss.alignment += w * r.alignment;
            loss.uniformity += w * r.uniformity;
            loss.ce += w * r.ce;
            loss.skipped_queries += r.skipped_queries;
        }
        let eval = data
            .eval
            .map(|e| e.score(&state.params, eval_seed, cfg.eval_restarts))
            .transpose()?;
        let metrics = EpochMetrics {
            epoch,
            loss,
            neighbor_audit: audit,
            eval,
            bank_version: state.bank.version(),
            warnings,
        };
        info!(
            "epoch {epoch}: loss {:.5} |S| {:.2}{}",
            loss.total,
            metrics.selected().map_or(0.0, |a| a.mean_size),
            eval.map_or(String::new(), |s| format!(" acc {:.4}", s.acc))
        );
        state.history.push(metrics);
        state.epoch = epoch + 1;
        observer.epoch_done(state.history.last().expect("just pushed"), &state)?;
    }
    Ok(RunOutcome {
        pretrain_eval,
        coarse_train_acc: pre.coarse_train_acc,
        state,
    })
}
