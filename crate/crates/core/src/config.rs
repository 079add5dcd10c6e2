//! Run configuration and its flat `key = value` file format.
//!
//! A config file must list every key (blank lines and `#` comments are
//! allowed); `dna config` prints a complete file with the defaults. Unknown
//! keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoise::{FilterConfig, PositiveMode};
use crate::encoder::{Architecture, OptimConfig};
use crate::error::{DnaError, Result};
use crate::synthdata::HierarchySpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub alpha: f64,
    pub k: usize,
    pub m_rank: usize,
    pub rank_epochs: usize,
    pub rank_by_abs: bool,
    pub use_label: bool,
    pub use_reciprocal: bool,
    pub positives: PositiveMode,
    pub lambda_ce: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub esteps_per_epoch: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub eval_restarts: usize,
    /// Assert the alignment/clustering identity on every batch.
    pub check_identity: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.07,
            alpha: 0.99,
            k: 60,
            m_rank: 5,
            rank_epochs: 1,
            rank_by_abs: false,
            use_label: true,
            use_reciprocal: true,
            positives: PositiveMode::Multi,
            lambda_ce: 1.0,
            lr: 1e-3,
            weight_decay: 0.01,
            grad_clip: 1.0,
            batch_size: 64,
            pretrain_epochs: 100,
            train_epochs: 20,
            esteps_per_epoch: 1,
            hidden_dim: 64,
            embed_dim: 16,
            eval_restarts: 10,
            check_identity: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DnaError::Config(m));
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return fail(format!("tau must be > 0 (got {})", self.tau));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1) (got {})", self.alpha));
        }
        if self.k < 1 {
            return fail("k must be >= 1".into());
        }
        if self.m_rank < 1 || self.m_rank > self.embed_dim {
            return fail(format!(
                "m_rank must lie in [1, embed_dim={}] (got {})",
                self.embed_dim, self.m_rank
            ));
        }
        for (name, v) in [
            ("lambda_ce", self.lambda_ce),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!(
                    "{name} must be a finite nonnegative number (got {v})"
                ));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("esteps_per_epoch", self.esteps_per_epoch),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("eval_restarts", self.eval_restarts),
        ] {
            if v < 1 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            ..OptimConfig::default()
        }
    }

    pub fn filters(&self) -> FilterConfig {
        FilterConfig {
            use_label: self.use_label,
            use_reciprocal: self.use_reciprocal,
            rank_epochs: self.rank_epochs,
            m_rank: self.m_rank,
            rank_by_abs: self.rank_by_abs,
            positives: self.positives,
        }
    }

    pub fn architecture(&self, input_dim: usize, num_coarse: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            num_coarse,
        }
    }
}

/// Dataset spec plus training settings, as stored in a config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: HierarchySpec,
    pub train: TrainConfig,
}

fn parse_value<T: FromStr>(map: &BTreeMap<String, (usize, String)>, key: &str) -> Result<T> {
    let (line, raw) = map
        .get(key)
        .ok_or_else(|| DnaError::MissingKey(key.to_string()))?;
    raw.parse()
        .map_err(|_| DnaError::parse(*line, format!("invalid value `{raw}` for `{key}`")))
}

fn parse_positives(s: &str) -> Option<PositiveMode> {
    match s {
        "single" => Some(PositiveMode::Single),
        "multi" => Some(PositiveMode::Multi),
        _ => None,
    }
}

fn positives_name(p: PositiveMode) -> &'static str {
    match p {
        PositiveMode::Single => "single",
        PositiveMode::Multi => "multi",
    }
}

/// Every recognized key, in file order.
pub const KEYS: &[&str] = &[
    "num_coarse",
    "fines_per_coarse",
    "samples_per_fine",
    "input_dim",
    "coarse_spread",
    "fine_spread",
    "noise_sigma",
    "imbalance",
    "data_seed",
    "tau",
    "alpha",
    "k",
    "m_rank",
    "rank_epochs",
    "rank_by_abs",
    "use_label",
    "use_reciprocal",
    "positives",
    "lambda_ce",
    "lr",
    "weight_decay",
    "grad_clip",
    "batch_size",
    "pretrain_epochs",
    "train_epochs",
    "esteps_per_epoch",
    "hidden_dim",
    "embed_dim",
    "eval_restarts",
    "check_identity",
    "seed",
];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        let d = &self.data;
        let t = &self.train;
        let values: Vec<String> = vec![
            d.num_coarse.to_string(),
            d.fines_per_coarse.to_string(),
            d.samples_per_fine.to_string(),
            d.input_dim.to_string(),
            format!("{:?}", d.coarse_spread),
            format!("{:?}", d.fine_spread),
            format!("{:?}", d.noise_sigma),
            format!("{:?}", d.imbalance),
            d.seed.to_string(),
            format!("{:?}", t.tau),
            format!("{:?}", t.alpha),
            t.k.to_string(),
            t.m_rank.to_string(),
            t.rank_epochs.to_string(),
            t.rank_by_abs.to_string(),
            t.use_label.to_string(),
            t.use_reciprocal.to_string(),
            positives_name(t.positives).to_string(),
            format!("{:?}", t.lambda_ce),
            format!("{:?}", t.lr),
            format!("{:?}", t.weight_decay),
            format!("{:?}", t.grad_clip),
            t.batch_size.to_string(),
            t.pretrain_epochs.to_string(),
            t.train_epochs.to_string(),
            t.esteps_per_epoch.to_string(),
            t.hidden_dim.to_string(),
            t.embed_dim.to_string(),
            t.eval_restarts.to_string(),
            t.check_identity.to_string(),
            t.seed.to_string(),
        ];
        let mut out = String::from("# dna run configuration\n");
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                DnaError::parse(lineno, format!("expected `key = value`, got `{line}`"))
            })?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(DnaError::parse(lineno, format!("unknown key `{k}`")));
            }
            if map
                .insert(k.to_string(), (lineno, v.trim().to_string()))
                .is_some()
            {
                return Err(DnaError::parse(lineno, format!("duplicate key `{k}`")));
            }
        }
        // report the first missing key in file order
        if let Some(k) = KEYS.iter().find(|k| !map.contains_key(**k)) {
            return Err(DnaError::MissingKey(k.to_string()));
        }
        let enum_value = |key: &str| -> Result<&(usize, String)> {
            map.get(key)
                .ok_or_else(|| DnaError::MissingKey(key.to_string()))
        };
        let (pl, pv) = enum_value("positives")?;
        let positives = parse_positives(pv).ok_or_else(|| {
            DnaError::parse(
                *pl,
                format!("positives must be `single` or `multi`, got `{pv}`"),
            )
        })?;
        let cfg = RunConfig {
            data: HierarchySpec {
                num_coarse: parse_value(&map, "num_coarse")?,
                fines_per_coarse: parse_value(&map, "fines_per_coarse")?,
                samples_per_fine: parse_value(&map, "samples_per_fine")?,
                input_dim: parse_value(&map, "input_dim")?,
                coarse_spread: parse_value(&map, "coarse_spread")?,
                fine_spread: parse_value(&map, "fine_spread")?,
                noise_sigma: parse_value(&map, "noise_sigma")?,
                imbalance: parse_value(&map, "imbalance")?,
                seed: parse_value(&map, "data_seed")?,
            },
            train: TrainConfig {
                tau: parse_value(&map, "tau")?,
                alpha: parse_value(&map, "alpha")?,
                k: parse_value(&map, "k")?,
                m_rank: parse_value(&map, "m_rank")?,
                rank_epochs: parse_value(&map, "rank_epochs")?,
                rank_by_abs: parse_value(&map, "rank_by_abs")?,
                use_label: parse_value(&map, "use_label")?,
                use_reciprocal: parse_value(&map, "use_reciprocal")?,
                positives,
                lambda_ce: parse_value(&map, "lambda_ce")?,
                lr: parse_value(&map, "lr")?,
                weight_decay: parse_value(&map, "weight_decay")?,
                grad_clip: parse_value(&map, "grad_clip")?,
                batch_size: parse_value(&map, "batch_size")?,
                pretrain_epochs: parse_value(&map, "pretrain_epochs")?,
                train_epochs: parse_value(&map, "train_epochs")?,
                esteps_per_epoch: parse_value(&map, "esteps_per_epoch")?,
                hidden_dim: parse_value(&map, "hidden_dim")?,
                embed_dim: parse_value(&map, "embed_dim")?,
                eval_restarts: parse_value(&map, "eval_restarts")?,
                check_identity: parse_value(&map, "check_identity")?,
                seed: parse_value(&map, "seed")?,
            },
        };
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DnaError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| DnaError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let t = TrainConfig::default();
        assert_eq!(t.tau, 0.07);
        assert_eq!(t.alpha, 0.99);
        assert_eq!(t.m_rank, 5);
        assert_eq!(t.rank_epochs, 1);
        assert_eq!(t.lambda_ce, 1.0);
        assert_eq!(t.batch_size, 64);
        assert_eq!(t.pretrain_epochs, 100);
        assert_eq!(t.train_epochs, 20);
        assert_eq!(t.weight_decay, 0.01);
        assert_eq!(t.grad_clip, 1.0);
        assert_eq!(t.k, HierarchySpec::default().samples_per_fine);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.positives = PositiveMode::Single;
        cfg.train.lr = 3.5e-4;
        cfg.data.seed = 99;
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn missing_key_is_named() {
        let text = RunConfig::default().to_text();
        let without: String = text
            .lines()
            .filter(|l| !l.starts_with("lambda_ce"))
            .map(|l| format!("{l}\n"))
            .collect();
        match RunConfig::parse(&without) {
            Err(DnaError::MissingKey(k)) => assert_eq!(k, "lambda_ce"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_values_are_reported() {
        let text = RunConfig::default()
            .to_text()
            .replace("tau = 0.07", "tau = hot");
        assert!(matches!(
            RunConfig::parse(&text),
            Err(DnaError::Parse { .. })
        ));
        let text = RunConfig::default().to_text() + "bogus = 1\n";
        assert!(RunConfig::parse(&text).is_err());
        let mut cfg = RunConfig::default();
        cfg.train.m_rank = 17;
        assert!(cfg.validate().is_err());
        cfg.train.m_rank = 5;
        cfg.train.alpha = 1.0;
        assert!(cfg.validate().is_err());
    }
}
