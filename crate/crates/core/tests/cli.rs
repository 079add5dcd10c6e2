//! End-to-end runs of the `dna` binary on a small hierarchy.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dna_core::config::RunConfig;
use dna_core::synthdata::{read_dataset, write_dataset, DATASET_MAGIC};
use serde_json::Value;

fn dna(args: &[&str]) -> Output {
    dna_env(args, "info")
}

fn dna_env(args: &[&str], level: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dna"))
        .args(args)
        .env("DNA_LOG_LEVEL", level)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .unwrap_or_else(|| panic!("no JSON error line in stderr: {text}"));
    serde_json::from_str(line).unwrap()
}

/// Writes a small config and a dataset generated from it.
fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let mut rc = RunConfig::default();
    rc.data.num_coarse = 3;
    rc.data.fines_per_coarse = 2;
    rc.data.samples_per_fine = 15;
    rc.data.input_dim = 8;
    rc.train.k = 12;
    rc.train.hidden_dim = 16;
    rc.train.embed_dim = 8;
    rc.train.pretrain_epochs = 8;
    rc.train.train_epochs = 3;
    rc.train.eval_restarts = 3;
    let config = dir.join("run.cfg");
    rc.write(&config).unwrap();
    let data = dir.join("ds.txt");
    let out = dna(&["generate", "--config", p(&config), "--out", p(&data)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    (config, data)
}

fn train(config: &Path, data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--config",
        p(config),
        "--dataset",
        p(data),
        "--out",
        p(out),
    ];
    args.extend_from_slice(extra);
    dna(&args)
}

#[test]
fn config_command_prints_a_parseable_default() {
    let out = dna(&["config"]);
    assert!(out.status.success());
    let rc = RunConfig::parse(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(rc, RunConfig::default());
}

#[test]
fn generate_writes_header_and_honors_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = setup(dir.path());
    let text = fs::read_to_string(&data).unwrap();
    assert!(text.starts_with(DATASET_MAGIC));

    let other = dir.path().join("other.txt");
    let out = dna(&[
        "generate",
        "--config",
        p(&config),
        "--out",
        p(&other),
        "--seed",
        "99",
    ]);
    assert!(out.status.success());
    let (a, b) = (read_dataset(&data).unwrap(), read_dataset(&other).unwrap());
    assert_eq!(a.train.len(), b.train.len());
    assert_ne!(a.train[0].x, b.train[0].x);
}

#[test]
fn missing_config_key_is_named_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let text: String = RunConfig::default()
        .to_text()
        .lines()
        .filter(|l| !l.starts_with("tau "))
        .map(|l| format!("{l}\n"))
        .collect();
    let config = dir.path().join("bad.cfg");
    fs::write(&config, text).unwrap();
    let out = dna(&[
        "generate",
        "--config",
        p(&config),
        "--out",
        p(&dir.path().join("x.txt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "missing_key");
    assert!(err["error"]["message"].as_str().unwrap().contains("tau"));
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = setup(dir.path());
    let run_a = dir.path().join("a");
    let out = train(&config, &data, &run_a, &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let metrics = fs::read_to_string(run_a.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    for line in metrics.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"]["total"].as_f64().unwrap().is_finite());
    }
    let audit = fs::read_to_string(run_a.join("neighbor_audit.csv")).unwrap();
    assert!(audit.starts_with("epoch,stage,mean_size,fine_accuracy\n"));
    assert_eq!(audit.lines().count(), 1 + 3 * 4);

    // printed summary equals the file
    let summary_text = fs::read_to_string(run_a.join("summary.json")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), summary_text);
    let summary: Value = serde_json::from_str(&summary_text).unwrap();
    assert_eq!(summary["epochs"], 3);

    // a second run is byte-identical
    let run_b = dir.path().join("b");
    assert!(train(&config, &data, &run_b, &[]).status.success());
    assert_eq!(
        summary_text,
        fs::read_to_string(run_b.join("summary.json")).unwrap()
    );
    assert_eq!(
        metrics,
        fs::read_to_string(run_b.join("metrics.jsonl")).unwrap()
    );

    // evaluating the pretrain checkpoint reproduces the summary's pretrain row
    let ckpt = run_a.join("pretrain.ckpt");
    let eval = dna(&["eval", "--checkpoint", p(&ckpt), "--dataset", p(&data)]);
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let report: Value = serde_json::from_slice(&eval.stdout).unwrap();
    for key in ["acc", "ari", "nmi"] {
        assert_eq!(report[key], summary["pretrain"][key], "{key}");
    }
    assert_eq!(report["k"], 12);
    let again = dna(&["eval", "--checkpoint", p(&ckpt), "--dataset", p(&data)]);
    assert_eq!(eval.stdout, again.stdout);

    // the last checkpoint reproduces the final row
    let last = dna(&[
        "eval",
        "--checkpoint",
        p(&run_a.join("last.ckpt")),
        "--dataset",
        p(&data),
    ]);
    let report: Value = serde_json::from_slice(&last.stdout).unwrap();
    assert_eq!(report["acc"], summary["last"]["acc"]);
    assert_eq!(report["checkpoint_id"], summary["checkpoint_id"]);
}

#[test]
fn overrides_reach_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = setup(dir.path());
    let run = dir.path().join("run");
    let out = train(
        &config,
        &data,
        &run,
        &["--lambda-ce", "0.25", "--k", "9", "--seed", "7"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["config"]["lambda_ce"], 0.25);
    assert_eq!(summary["config"]["k"], 9);
    assert_eq!(summary["config"]["seed"], 7);
    let saved = RunConfig::read(run.join("config.txt")).unwrap();
    assert_eq!(saved.train.k, 9);
}

#[test]
fn corrupted_checkpoint_gives_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = setup(dir.path());
    let run = dir.path().join("run");
    assert!(train(&config, &data, &run, &[]).status.success());
    let ckpt = run.join("last.ckpt");
    let text = fs::read_to_string(&ckpt).unwrap();
    fs::write(&ckpt, &text[..text.len() / 2]).unwrap();
    let out = dna(&["eval", "--checkpoint", p(&ckpt), "--dataset", p(&data)]);
    assert_ne!(out.status.code(), Some(0));
    let err = stderr_json(&out);
    assert!(err["error"]["kind"].is_string());
    assert!(out.stdout.is_empty());
}

#[test]
fn eval_needs_fine_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = setup(dir.path());
    let run = dir.path().join("run");
    assert!(train(&config, &data, &run, &[]).status.success());
    let mut ds = read_dataset(&data).unwrap();
    ds.test.iter_mut().for_each(|s| s.fine = None);
    let unlabeled = dir.path().join("unlabeled.txt");
    write_dataset(&ds, &unlabeled).unwrap();
    let out = dna(&[
        "eval",
        "--checkpoint",
        p(&run.join("last.ckpt")),
        "--dataset",
        p(&unlabeled),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("fine"));
}

#[test]
fn ablate_single_variant() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = setup(dir.path());
    let run = dir.path().join("abl");
    let out = dna(&[
        "ablate",
        "--config",
        p(&config),
        "--dataset",
        p(&data),
        "--out",
        p(&run),
        "--variants",
        "knn_raw",
        "--repeats",
        "1",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(run.join("ablation.csv")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), csv);
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("knn_raw,"));

    let bad = dna(&[
        "ablate",
        "--config",
        p(&config),
        "--dataset",
        p(&data),
        "--out",
        p(&run),
        "--variants",
        "bogus",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn log_levels() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = setup(dir.path());
    let out = dna_env(
        &[
            "train",
            "--config",
            p(&config),
            "--dataset",
            p(&data),
            "--out",
            p(&dir.path().join("d")),
        ],
        "debug",
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["config"]["check_identity"], true);

    let quiet = dna_env(&["config"], "error");
    assert!(quiet.status.success());
    assert!(quiet.stderr.is_empty());

    let bad = dna_env(&["config"], "loud");
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(stderr_json(&bad)["error"]["kind"], "config");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(dna(&["train"]).status.code(), Some(1));
    assert_eq!(dna(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = dna(&[
        "train",
        "--dataset",
        p(&dir.path().join("missing.txt")),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["kind"], "io");
}
