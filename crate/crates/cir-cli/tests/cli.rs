//! End-to-end tests of the `cir` binary: exit-code contract, artifact
//! reproducibility, cache behavior, and the stdout JSON schema.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cir")
}

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cir_cli_{}_{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn synth_small(dir: &Path) {
    let out = run_in(
        dir,
        &[
            "synth",
            "--out",
            "data",
            "--seed",
            "7",
            "--gallery-size",
            "120",
            "--dim",
            "16",
        ],
    );
    assert!(out.status.success(), "synth failed: {out:?}");
}

#[test]
fn synth_writes_expected_artifacts() {
    let dir = temp_dir("synth");
    synth_small(&dir);
    for f in [
        "data/gallery.emb1",
        "data/triplets.jsonl",
        "data/truth_a.emb1",
        "data/truth_b.emb1",
        "data/truth_tokens.emb1",
        "data/run.json",
    ] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("data/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["verb"], "synth");
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["artifacts"]["gallery"]["sha256"].is_string());
}

#[test]
fn rerunning_synth_reproduces_identical_bytes() {
    let dir = temp_dir("synth_repro");
    synth_small(&dir);
    let read_all = |d: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<String> = std::fs::read_dir(d.join("data"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|f| {
                let bytes = std::fs::read(d.join("data").join(&f)).unwrap();
                (f, bytes)
            })
            .collect()
    };
    let first = read_all(&dir);
    synth_small(&dir);
    let second = read_all(&dir);
    assert_eq!(
        first, second,
        "synthetic artifacts changed across identical runs"
    );
}

#[test]
fn missing_data_dir_is_a_data_error_naming_the_path() {
    let dir = temp_dir("missing_data");
    let out = run_in(
        &dir,
        &[
            "train",
            "--mode",
            "dpo",
            "--data",
            "no_such_dir",
            "--out",
            "run",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "expected exit 2, got {out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("no_such_dir"),
        "diagnostic does not name the path: {stderr}"
    );
}

#[test]
fn unknown_flags_are_rejected_with_usage_exit() {
    let dir = temp_dir("unknown_flag");
    let out = run_in(&dir, &["synth", "--out", "data", "--frobnicate", "1"]);
    assert_eq!(out.status.code(), Some(1), "expected exit 1, got {out:?}");
}

#[test]
fn train_without_mode_or_config_is_usage_error() {
    let dir = temp_dir("no_mode");
    synth_small(&dir);
    let out = run_in(&dir, &["train", "--data", "data", "--out", "run"]);
    assert_eq!(out.status.code(), Some(1), "expected exit 1, got {out:?}");
}

#[test]
fn build_index_caches_and_reloads() {
    let dir = temp_dir("index_cache");
    synth_small(&dir);
    let first = run_in(
        &dir,
        &["build-index", "--data", "data", "--index-cache", "ix.fip"],
    );
    assert!(first.status.success(), "{first:?}");
    let stderr = String::from_utf8_lossy(&first.stderr);
    assert!(
        stderr.contains("built index"),
        "first run should build: {stderr}"
    );
    let bytes_first = std::fs::read(dir.join("ix.fip")).unwrap();

    let second = run_in(
        &dir,
        &["build-index", "--data", "data", "--index-cache", "ix.fip"],
    );
    assert!(second.status.success(), "{second:?}");
    let stderr = String::from_utf8_lossy(&second.stderr);
    assert!(
        stderr.contains("loaded index cache"),
        "second run should load the cache: {stderr}"
    );
    let bytes_second = std::fs::read(dir.join("ix.fip")).unwrap();
    assert_eq!(bytes_first, bytes_second);

    let doc: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&second.stdout).trim()).unwrap();
    assert_eq!(doc["loaded_from_cache"], true);
    assert_eq!(doc["dim"], 16);
}

#[test]
fn train_runs_are_byte_identical_and_eval_matches() {
    let dir = temp_dir("train_repro");
    synth_small(&dir);
    let train = |out: &str| {
        let o = run_in(
            &dir,
            &[
                "train", "--mode", "infonce", "--data", "data", "--out", out, "--epochs", "2",
                "--seed", "11",
            ],
        );
        assert!(o.status.success(), "train failed: {o:?}");
        o
    };
    // Same manifest (same out dir) run twice: every artifact byte-identical.
    let out_a = train("run_a");
    let snapshot: Vec<(String, Vec<u8>)> = ["best.ckpt", "history.jsonl", "run.json"]
        .iter()
        .map(|f| {
            (
                f.to_string(),
                std::fs::read(dir.join("run_a").join(f)).unwrap(),
            )
        })
        .collect();
    let _ = train("run_a");
    for (f, before) in &snapshot {
        let after = std::fs::read(dir.join("run_a").join(f)).unwrap();
        assert_eq!(
            &after, before,
            "artifact {f} differs between identical runs"
        );
    }
    // A different out dir still yields identical model artifacts.
    let _ = train("run_b");
    for f in ["best.ckpt", "history.jsonl"] {
        let a = std::fs::read(dir.join("run_a").join(f)).unwrap();
        let b = std::fs::read(dir.join("run_b").join(f)).unwrap();
        assert_eq!(a, b, "artifact {f} differs across output directories");
    }

    // stdout of train carries the best-epoch report; eval of the saved
    // checkpoint must reproduce it byte for byte.
    let eval = run_in(
        &dir,
        &[
            "eval",
            "--checkpoint",
            "run_a/best.ckpt",
            "--data",
            "data",
            "--split",
            "val",
        ],
    );
    assert!(eval.status.success(), "{eval:?}");
    assert_eq!(
        String::from_utf8_lossy(&eval.stdout),
        String::from_utf8_lossy(&out_a.stdout),
        "checkpoint re-evaluation diverged from the training-time report"
    );
}

#[test]
fn eval_stdout_matches_report_schema() {
    let dir = temp_dir("eval_schema");
    synth_small(&dir);
    let out = run_in(&dir, &["eval", "--data", "data", "--mode", "zeroshot"]);
    assert!(out.status.success(), "{out:?}");
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.ends_with('\n'));
    let doc: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    for key in ["categories", "average", "query_count"] {
        assert!(doc.get(key).is_some(), "missing key {key}");
    }
    for key in doc["average"].as_object().unwrap().keys() {
        assert!(key.starts_with("R@"));
    }
}

#[test]
fn report_verb_round_trips_eval_output() {
    let dir = temp_dir("report_rt");
    synth_small(&dir);
    let eval = run_in(
        &dir,
        &[
            "eval", "--data", "data", "--mode", "zeroshot", "--out", "evald",
        ],
    );
    assert!(eval.status.success(), "{eval:?}");
    assert!(dir.join("evald/report.json").exists());
    assert!(dir.join("evald/run.json").exists());

    let report = run_in(&dir, &["report", "--input", "evald/report.json"]);
    assert!(report.status.success(), "{report:?}");
    assert_eq!(
        String::from_utf8_lossy(&report.stdout),
        std::fs::read_to_string(dir.join("evald/report.json")).unwrap(),
        "report verb did not re-render canonically"
    );
}

#[test]
fn dpo_training_with_cache_flag_works() {
    let dir = temp_dir("dpo_cache");
    synth_small(&dir);
    let out = run_in(
        &dir,
        &[
            "train",
            "--mode",
            "dpo",
            "--data",
            "data",
            "--out",
            "run_dpo",
            "--epochs",
            "1",
            "--index-cache",
            "mine.fip",
        ],
    );
    assert!(out.status.success(), "{out:?}");
    assert!(dir.join("mine.fip").exists(), "mining cache not written");
    assert!(dir.join("run_dpo/best.ckpt").exists());
    // History is one JSON object per line.
    let history = std::fs::read_to_string(dir.join("run_dpo/history.jsonl")).unwrap();
    for line in history.lines() {
        let doc: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(doc["epoch"].is_number());
        assert!(doc["train_loss"].is_number());
    }
}

#[test]
fn threads_flag_is_accepted() {
    let dir = temp_dir("threads");
    synth_small(&dir);
    let out = run_in(
        &dir,
        &[
            "--threads",
            "2",
            "eval",
            "--data",
            "data",
            "--mode",
            "zeroshot",
        ],
    );
    assert!(out.status.success(), "{out:?}");
}

#[test]
fn cir_threads_env_is_accepted() {
    let dir = temp_dir("threads_env");
    synth_small(&dir);
    let out = Command::new(bin())
        .args(["eval", "--data", "data", "--mode", "zeroshot"])
        .env("CIR_THREADS", "1")
        .current_dir(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{out:?}");
}

#[test]
fn config_file_sets_mode_defaults_and_flags_override() {
    let dir = temp_dir("config_file");
    synth_small(&dir);
    std::fs::write(
        dir.join("train.json"),
        r#"{"mode":"retrieval_dpo","epochs":2,"seed":5}"#,
    )
    .unwrap();
    let out = run_in(
        &dir,
        &[
            "train",
            "--data",
            "data",
            "--out",
            "run_cfg",
            "--config",
            "train.json",
            "--epochs",
            "1",
        ],
    );
    assert!(out.status.success(), "{out:?}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run_cfg/run.json")).unwrap())
            .unwrap();
    // Fields resolve in order: dpo-mode defaults, then the file, then flags.
    assert_eq!(manifest["config"]["mode"], "retrieval_dpo");
    assert_eq!(manifest["config"]["batch_size"], 256, "dpo default batch");
    assert_eq!(manifest["config"]["seed"], 5, "seed from the config file");
    assert_eq!(manifest["config"]["epochs"], 1, "flag overrides the file");
}
