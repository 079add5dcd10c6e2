//! Command-line front end: argument parsing, artifact writing and exit codes.
//!
//! Exit codes: 0 success, 1 usage/config/input error, 2 numeric abort,
//! 3 partial ablation failure. Failures print one JSON object
//! `{"error":{"kind":..,"message":..}}` to standard error.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::ablation::{run_ablation, AblationTable, Variant};
use crate::checkpoint::TensorDump;
use crate::config::{RunConfig, TrainConfig};
use crate::denoise::Stage;
use crate::error::{DnaError, Result};
use crate::eval::{evaluate_test_split, ClusterScores, EvalReport, NeighborAuditor};
use crate::synthdata::{generate, read_dataset, write_dataset, Dataset, Split};
use crate::trainer::{
    pretrain_dump, run, EpochMetrics, EvalSplit, Pretrained, RunData, RunObserver, RunState,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const AUDIT_FILE: &str = "neighbor_audit.csv";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";

#[derive(Debug, Parser)]
#[command(
    name = "dna",
    version,
    about = "Fine-grained category discovery from coarse labels"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print a complete config file with default values.
    Config {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the dataset seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain and train on a dataset, writing metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: TrainArgs,
    },
    /// Run the variant ladder and write a comparison table.
    Ablate {
        #[command(flatten)]
        common: TrainArgs,
        /// Comma-separated variant names (default: all).
        #[arg(long)]
        variants: Option<String>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Score a checkpoint on the test split and print a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "lambda-ce")]
    pub lambda_ce: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long = "rank-epochs")]
    pub rank_epochs: Option<usize>,
    #[arg(long = "rank-by-abs")]
    pub rank_by_abs: Option<bool>,
}

/// Precedence: command line, then config file, then defaults.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

impl TrainArgs {
    pub fn resolve(&self, debug: bool) -> Result<TrainConfig> {
        let mut t = load_config(self.config.as_deref())?.train;
        if let Some(s) = self.seed {
            t.seed = s;
        }
        if let Some(l) = self.lambda_ce {
            t.lambda_ce = l;
        }
        if let Some(k) = self.k {
            t.k = k;
        }
        if let Some(r) = self.rank_epochs {
            t.rank_epochs = r;
        }
        if let Some(b) = self.rank_by_abs {
            t.rank_by_abs = b;
        }
        if debug {
            t.check_identity = true;
        }
        t.validate()?;
        Ok(t)
    }
}

pub fn exit_code(err: &DnaError) -> i32 {
    match err {
        DnaError::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

pub fn error_json(err: &DnaError) -> String {
    serde_json::json!({ "error": { "kind": err.kind(), "message": err.to_string() } }).to_string()
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| DnaError::io(p, e))
}

fn write_file(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| DnaError::io(p, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("metrics serialize")
}

fn to_json_pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("metrics serialize") + "\n"
}

/// Test-split view and train-split auditor, whichever the dataset supports.
fn labeled_views(ds: &Dataset) -> Result<(Option<EvalSplit>, Option<NeighborAuditor>)> {
    let eval = match ds.fine_labels(Split::Test) {
        Some(l) if !l.is_empty() => Some(EvalSplit::new(ds.inputs(Split::Test), l)?),
        _ => None,
    };
    let auditor = ds.fine_labels(Split::Train).map(NeighborAuditor::new);
    Ok((eval, auditor))
}

fn check_dims(ds: &Dataset) -> Result<()> {
    if ds.train.is_empty() {
        return Err(DnaError::Structural(
            "dataset has an empty train split".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Scores {
    acc: f64,
    ari: f64,
    nmi: f64,
}

impl From<ClusterScores> for Scores {
    fn from(s: ClusterScores) -> Self {
        Scores {
            acc: crate::eval::percent(s.acc),
            ari: crate::eval::percent(s.ari),
            nmi: crate::eval::percent(s.nmi),
        }
    }
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    config: &'a TrainConfig,
    epochs: usize,
    coarse_train_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pretrain: Option<Scores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    last: Option<Scores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_epoch: Option<usize>,
    final_loss: Option<f64>,
    mean_selected_first: Option<f64>,
    mean_selected_last: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    neighbor_acc_first: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    neighbor_acc_last: Option<f64>,
    checkpoint_id: String,
}

/// Writes metrics lines, audit rows and checkpoints as the run progresses.
struct FileObserver<'a> {
    dir: &'a Path,
    cfg: &'a TrainConfig,
    metrics: File,
    audit: File,
    with_accuracy: bool,
    last_id: String,
}

impl FileObserver<'_> {
    fn audit_rows(&mut self, m: &EpochMetrics) -> Result<()> {
        let path = self.dir.join(AUDIT_FILE);
        for a in &m.neighbor_audit {
            let line = if self.with_accuracy {
                let acc = a.fine_accuracy.map_or(String::new(), |v| format!("{v:.6}"));
                format!(
                    "{},{},{:.6},{}\n",
                    m.epoch,
                    a.stage.name(),
                    a.mean_size,
                    acc
                )
            } else {
                format!("{},{},{:.6}\n", m.epoch, a.stage.name(), a.mean_size)
            };
            self.audit
                .write_all(line.as_bytes())
                .map_err(|e| DnaError::io(&path, e))?;
        }
        Ok(())
    }
}

impl RunObserver for FileObserver<'_> {
    fn pretrained(&mut self, pre: &Pretrained, _scores: Option<&ClusterScores>) -> Result<()> {
        let dump = pretrain_dump(pre, self.cfg);
        dump.write(self.dir.join(PRETRAIN_CKPT))?;
        self.last_id = dump.fingerprint();
        Ok(())
    }

    fn epoch_done(&mut self, m: &EpochMetrics, state: &RunState) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        writeln!(self.metrics, "{}", to_json(m)).map_err(|e| DnaError::io(&path, e))?;
        self.audit_rows(m)?;
        // written only after a finite epoch, so it is always the last good state
        let dump = state.to_dump(self.cfg);
        dump.write(self.dir.join(LAST_CKPT))?;
        self.last_id = dump.fingerprint();
        Ok(())
    }
}

pub fn cmd_generate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = load_config(config)?.data;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = generate(&spec)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_dataset(&ds, out)
}

/// Returns the summary JSON text.
pub fn cmd_train(args: &TrainArgs, debug: bool) -> Result<String> {
    let cfg = args.resolve(debug)?;
    let ds = read_dataset(&args.dataset)?;
    check_dims(&ds)?;
    create_dir(&args.out)?;
    let mut rc = load_config(args.config.as_deref())?;
    rc.train = cfg.clone();
    rc.write(args.out.join(CONFIG_FILE))?;

    let (eval, auditor) = labeled_views(&ds)?;
    let train = ds.train_view();
    let open = |name: &str| {
        let p = args.out.join(name);
        File::create(&p).map_err(|e| DnaError::io(&p, e))
    };
    let mut audit = open(AUDIT_FILE)?;
    let with_accuracy = auditor.is_some();
    let header = if with_accuracy {
        "epoch,stage,mean_size,fine_accuracy\n"
    } else {
        "epoch,stage,mean_size\n"
    };
    audit
        .write_all(header.as_bytes())
        .map_err(|e| DnaError::io(args.out.join(AUDIT_FILE), e))?;
    let mut obs = FileObserver {
        dir: &args.out,
        cfg: &cfg,
        metrics: open(METRICS_FILE)?,
        audit,
        with_accuracy,
        last_id: String::new(),
    };
    let data = RunData {
        train: &train,
        eval: eval.as_ref(),
        auditor: auditor.as_ref(),
    };
    let out = run(&cfg, data, &mut obs)?;
    let h = &out.state.history;
    fn selected(m: Option<&EpochMetrics>) -> Option<&crate::denoise::StageAudit> {
        m.and_then(|m| m.neighbor_audit.iter().find(|a| a.stage == Stage::Selected))
    }
    let best_epoch = h
        .iter()
        .filter_map(|m| m.eval.map(|e| (m.epoch, e.acc)))
        .fold(None, |best: Option<(usize, f64)>, (e, a)| match best {
            Some((_, b)) if b >= a => best,
            _ => Some((e, a)),
        })
        .map(|(e, _)| e);
    let summary = Summary {
        config: &cfg,
        epochs: h.len(),
        coarse_train_acc: crate::eval::percent(out.coarse_train_acc),
        pretrain: out.pretrain_eval.map(Scores::from),
        last: h.last().and_then(|m| m.eval).map(Scores::from),
        best_epoch,
        final_loss: h.last().map(|m| m.loss.total),
        mean_selected_first: selected(h.first()).map(|a| a.mean_size),
        mean_selected_last: selected(h.last()).map(|a| a.mean_size),
        neighbor_acc_first: selected(h.first())
            .and_then(|a| a.fine_accuracy)
            .map(crate::eval::percent),
        neighbor_acc_last: selected(h.last())
            .and_then(|a| a.fine_accuracy)
            .map(crate::eval::percent),
        checkpoint_id: obs.last_id.clone(),
    };
    let text = to_json_pretty(&summary);
    write_file(&args.out.join(SUMMARY_FILE), &text)?;
    Ok(text)
}

/// Returns the table; the caller maps failures to an exit code.
pub fn cmd_ablate(
    args: &TrainArgs,
    variants: Option<&str>,
    repeats: usize,
    debug: bool,
) -> Result<AblationTable> {
    let cfg = args.resolve(debug)?;
    let variants = match variants {
        Some(v) => Variant::parse_list(v)?,
        None => Variant::ALL.to_vec(),
    };
    if variants.is_empty() {
        return Err(DnaError::Config("no variants selected".into()));
    }
    if repeats < 1 {
        return Err(DnaError::Config("repeats must be >= 1".into()));
    }
    let ds = read_dataset(&args.dataset)?;
    check_dims(&ds)?;
    let (eval, auditor) = labeled_views(&ds)?;
    if eval.is_none() {
        return Err(DnaError::Structural(
            "ablation needs fine labels on the test split".into(),
        ));
    }
    let train = ds.train_view();
    let data = RunData {
        train: &train,
        eval: eval.as_ref(),
        auditor: auditor.as_ref(),
    };
    let table = run_ablation(&cfg, data, &variants, repeats)?;
    create_dir(&args.out)?;
    write_file(&args.out.join(ABLATION_CSV), &table.to_csv())?;
    write_file(&args.out.join(ABLATION_JSON), &to_json_pretty(&table))?;
    Ok(table)
}

/// Score the query encoder stored in `checkpoint` on the test split.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    seed: Option<u64>,
    k: Option<usize>,
) -> Result<EvalReport> {
    let dump = TensorDump::read(checkpoint)?;
    let params = dump.read_params("query")?;
    params.validate()?;
    let meta_usize = |key: &str| -> Result<Option<u64>> {
        dump.meta(key)
            .map(|v| {
                v.parse::<u64>().map_err(|_| {
                    DnaError::Structural(format!("checkpoint meta `{key}` is not an integer"))
                })
            })
            .transpose()
    };
    let seed = match seed {
        Some(s) => s,
        None => meta_usize("seed")?.unwrap_or(0),
    };
    let k = match k {
        Some(k) => k,
        None => meta_usize("k")?.unwrap_or(1) as usize,
    };
    let restarts =
        meta_usize("eval_restarts")?.unwrap_or(crate::eval::DEFAULT_RESTARTS as u64) as usize;
    let ds = read_dataset(dataset)?;
    let (scores, neighbor_acc) = evaluate_test_split(&params, &ds, seed, k, restarts)?;
    Ok(EvalReport::new(
        scores,
        neighbor_acc,
        k,
        seed,
        dump.fingerprint(),
    ))
}

/// Run a parsed command; returns the process exit code.
pub fn execute(cli: Cli, debug: bool) -> i32 {
    let result = match cli.command {
        Command::Config { out } => {
            let text = RunConfig::default().to_text();
            match out {
                Some(p) => write_file(&p, &text).map(|_| EXIT_OK),
                None => {
                    print!("{text}");
                    Ok(EXIT_OK)
                }
            }
        }
        Command::Generate { config, out, seed } => cmd_generate(config.as_deref(), &out, seed).map(|_| EXIT_OK),
        Command::Train { common } => cmd_train(&common, debug).map(|text| {
            print!("{text}");
            EXIT_OK
        }),
        Command::Ablate {
            common,
            variants,
            repeats,
        } => cmd_ablate(&common, variants.as_deref(), repeats, debug).map(|t| {
            print!("{}", t.to_csv());
            let failed = t.failures();
            if failed > 0 {
                eprintln!(
                    "{}",
                    serde_json::json!({ "error": { "kind": "partial_failure", "message": format!("{failed} ablation runs failed") } })
                );
                EXIT_PARTIAL
            } else {
                EXIT_OK
            }
        }),
        Command::Eval {
            checkpoint,
            dataset,
            seed,
            k,
            out,
        } => cmd_eval(&checkpoint, &dataset, seed, k).and_then(|r| {
            let text = to_json_pretty(&r);
            if let Some(p) = out {
                write_file(&p, &text)?;
            }
            print!("{text}");
            Ok(EXIT_OK)
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}
