//! The cumulative variant ladder: each variant is a pure delta on a base
//! [`TrainConfig`], so no variant has its own code path.
//!
//! Seeds: repeat `r` pretrains with `derive_seed(base, r)`, shared by every
//! variant of that repeat; variant `v` then trains with
//! `derive_seed(derive_seed(base, r), name_tag(v))`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::denoise::{PositiveMode, Stage};
use crate::error::{DnaError, Result};
use crate::eval::percent;
use crate::rng::{derive_seed, name_tag};
use crate::trainer::{pretrain, run_pretrained, RunData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "knn_raw")]
    KnnRaw,
    #[serde(rename = "nncl_single_positive")]
    NnclSinglePositive,
    #[serde(rename = "multi_positive")]
    MultiPositive,
    #[serde(rename = "+coarse_ce")]
    CoarseCe,
    #[serde(rename = "+label")]
    Label,
    #[serde(rename = "+reciprocal")]
    Reciprocal,
    #[serde(rename = "+rank")]
    Rank,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::KnnRaw,
        Variant::NnclSinglePositive,
        Variant::MultiPositive,
        Variant::CoarseCe,
        Variant::Label,
        Variant::Reciprocal,
        Variant::Rank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::KnnRaw => "knn_raw",
            Variant::NnclSinglePositive => "nncl_single_positive",
            Variant::MultiPositive => "multi_positive",
            Variant::CoarseCe => "+coarse_ce",
            Variant::Label => "+label",
            Variant::Reciprocal => "+reciprocal",
            Variant::Rank => "+rank",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || (s == "full" && *v == Variant::Rank))
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                DnaError::Config(format!(
                    "unknown variant `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }

    /// Parse a comma-separated list.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(Variant::parse)
            .collect()
    }

    /// The base config with this variant's components switched on or off.
    /// The CE weight, rank schedule and filter settings of `base` are what the
    /// ladder adds back step by step.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.use_label = false;
        c.use_reciprocal = false;
        c.rank_epochs = 0;
        c.positives = PositiveMode::Multi;
        match self {
            // unfiltered multi-positive control, training settings otherwise as configured
            Variant::KnnRaw => {}
            Variant::NnclSinglePositive => {
                c.positives = PositiveMode::Single;
                c.lambda_ce = 0.0;
            }
            Variant::MultiPositive => c.lambda_ce = 0.0,
            Variant::CoarseCe => {}
            Variant::Label => c.use_label = true,
            Variant::Reciprocal => {
                c.use_label = true;
                c.use_reciprocal = true;
            }
            Variant::Rank => {
                c.use_label = true;
                c.use_reciprocal = true;
                c.rank_epochs = base.rank_epochs;
            }
        }
        c
    }
}

pub fn repeat_seed(base: u64, repeat: usize) -> u64 {
    derive_seed(base, repeat as u64)
}

pub fn variant_seed(base: u64, repeat: usize, variant: Variant) -> u64 {
    derive_seed(repeat_seed(base, repeat), name_tag(variant.name()))
}

/// Scores of one (variant, repeat) run, as percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub variant: Variant,
    pub repeat: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub result: RowResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RowResult {
    Ok(RowScores),
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowScores {
    pub acc: f64,
    pub ari: f64,
    pub nmi: f64,
    pub pretrain_acc: f64,
    /// Diagnostic fine accuracy of the selected positives at epoch 0 and at
    /// the final epoch, when fine labels were available.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neighbor_acc_first: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neighbor_acc_last: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_neighbor_acc_first: Option<f64>,
    pub mean_selected_first: f64,
    pub mean_selected_last: f64,
}

/// Seed-mean of the successful repeats of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub variant: Variant,
    pub runs: usize,
    pub failed: usize,
    pub acc: Option<f64>,
    pub ari: Option<f64>,
    pub nmi: Option<f64>,
    pub neighbor_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<MeanRow>,
    pub runs: Vec<RunRow>,
}

impl AblationTable {
    pub fn failures(&self) -> usize {
        self.runs
            .iter()
            .filter(|r| matches!(r.result, RowResult::Failed { .. }))
            .count()
    }

    pub fn mean(&self, v: Variant) -> Option<&MeanRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,runs,failed,acc,ari,nmi,neighbor_acc\n");
        let cell = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.2}"));
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.variant.name(),
                r.runs,
                r.failed,
                cell(r.acc),
                cell(r.ari),
                cell(r.nmi),
                cell(r.neighbor_acc)
            )
            .unwrap();
        }
        out
    }
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        None
    } else {
        Some(percent(v.iter().sum::<f64>() / v.len() as f64 / 100.0))
    }
}

fn run_one(
    base: &TrainConfig,
    data: RunData<'_>,
    pre: &crate::trainer::Pretrained,
    variant: Variant,
    repeat: usize,
) -> RunRow {
    let mut cfg = variant.apply(base);
    cfg.seed = variant_seed(base.seed, repeat, variant);
    let result = run_pretrained(&cfg, data, pre, &mut ()).and_then(|out| {
        let h = &out.state.history;
        let first = h.first();
        let last = h.last();
        let eval = last
            .and_then(|m| m.eval)
            .or(out.pretrain_eval)
            .ok_or_else(|| DnaError::Structural("ablation needs a labeled test split".into()))?;
        let pre_eval = out
            .pretrain_eval
            .ok_or_else(|| DnaError::Structural("ablation needs a labeled test split".into()))?;
        let stage = |m: Option<&crate::trainer::EpochMetrics>, s: Stage| {
            m.and_then(|m| m.neighbor_audit.iter().find(|a| a.stage == s).cloned())
        };
        Ok(RowScores {
            acc: percent(eval.acc),
            ari: percent(eval.ari),
            nmi: percent(eval.nmi),
            pretrain_acc: percent(pre_eval.acc),
            neighbor_acc_first: stage(first, Stage::Selected)
                .and_then(|a| a.fine_accuracy)
                .map(percent),
            neighbor_acc_last: stage(last, Stage::Selected)
                .and_then(|a| a.fine_accuracy)
                .map(percent),
            raw_neighbor_acc_first: stage(first, Stage::Raw)
                .and_then(|a| a.fine_accuracy)
                .map(percent),
            mean_selected_first: stage(first, Stage::Selected).map_or(0.0, |a| a.mean_size),
            mean_selected_last: stage(last, Stage::Selected).map_or(0.0, |a| a.mean_size),
        })
    });
    RunRow {
        variant,
        repeat,
        seed: cfg.seed,
        result: match result {
            Ok(s) => RowResult::Ok(s),
            Err(e) => RowResult::Failed {
                error: e.to_string(),
            },
        },
    }
}

/// Run every variant for `repeats` repeats. Failed runs are recorded, not
/// propagated.
pub fn run_ablation(
    base: &TrainConfig,
    data: RunData<'_>,
    variants: &[Variant],
    repeats: usize,
) -> Result<AblationTable> {
    base.validate()?;
    let mut runs = Vec::new();
    for repeat in 0..repeats {
        let mut pcfg = base.clone();
        pcfg.seed = repeat_seed(base.seed, repeat);
        match pretrain(data.train, &pcfg) {
            Ok(pre) => {
                let rows: Vec<RunRow> = variants
                    .par_iter()
                    .map(|&v| run_one(base, data, &pre, v, repeat))
                    .collect();
                runs.extend(rows);
            }
            Err(e) => runs.extend(variants.iter().map(|&v| RunRow {
                variant: v,
                repeat,
                seed: variant_seed(base.seed, repeat, v),
                result: RowResult::Failed {
                    error: format!("pretraining failed: {e}"),
                },
            })),
        }
    }
    let rows = variants
        .iter()
        .map(|&v| {
            let ok: Vec<&RowScores> = runs
                .iter()
                .filter(|r| r.variant == v)
                .filter_map(|r| match &r.result {
                    RowResult::Ok(s) => Some(s),
                    RowResult::Failed { .. } => None,
                })
                .collect();
            let total = runs.iter().filter(|r| r.variant == v).count();
            MeanRow {
                variant: v,
                runs: ok.len(),
                failed: total - ok.len(),
                acc: mean_of(ok.iter().map(|s| s.acc)),
                ari: mean_of(ok.iter().map(|s| s.ari)),
                nmi: mean_of(ok.iter().map(|s| s.nmi)),
                neighbor_acc: mean_of(ok.iter().filter_map(|s| s.neighbor_acc_first)),
            }
        })
        .collect();
    Ok(AblationTable { rows, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_is_cumulative() {
        let base = TrainConfig::default();
        let full = Variant::Rank.apply(&base);
        assert_eq!(full, base);
        let nncl = Variant::NnclSinglePositive.apply(&base);
        assert_eq!(nncl.positives, PositiveMode::Single);
        assert!(!nncl.use_label && !nncl.use_reciprocal && nncl.rank_epochs == 0);
        assert_eq!(nncl.lambda_ce, 0.0);
        let multi = Variant::MultiPositive.apply(&base);
        assert_eq!(multi.positives, PositiveMode::Multi);
        assert_eq!(Variant::CoarseCe.apply(&base).lambda_ce, base.lambda_ce);
        assert!(Variant::Label.apply(&base).use_label);
        assert!(!Variant::Label.apply(&base).use_reciprocal);
        assert!(Variant::Reciprocal.apply(&base).use_reciprocal);
        assert_eq!(Variant::Reciprocal.apply(&base).rank_epochs, 0);
    }

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
            assert_eq!(
                serde_json::to_string(&v).unwrap(),
                format!("\"{}\"", v.name())
            );
        }
        assert_eq!(Variant::parse("full").unwrap(), Variant::Rank);
        assert!(Variant::parse("bogus").is_err());
        assert_eq!(
            Variant::parse_list("knn_raw,+rank").unwrap(),
            vec![Variant::KnnRaw, Variant::Rank]
        );
    }

    #[test]
    fn seeds_differ_per_variant_and_repeat() {
        let mut seen = std::collections::HashSet::new();
        for r in 0..3 {
            for v in Variant::ALL {
                assert!(seen.insert(variant_seed(0, r, v)));
            }
        }
    }
}
