//! End-to-end tests of the `eksft` binary: exit codes, overwrite protection,
//! run-directory contents and reproducibility from `config.json`.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn eksft(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eksft"))
        .args(args)
        .env("EKSFT_RUN_ROOT", root)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = eksft(root, args);
    assert!(
        out.status.success(),
        "eksft {args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(root: &Path, rel: &str) -> String {
    root.join(rel).display().to_string()
}

/// Tiny dataset and a briefly pretrained small model under `root`.
fn fixture(root: &Path) {
    let spec = root.join("spec.json");
    std::fs::write(&spec, r#"{"counts":{"pretrain":48,"sft":12,"rl":8,"eval":4},"seed":3}"#).unwrap();
    ok(root, &["gen-data", spec.to_str().unwrap(), "--out", "data"]);
    ok(
        root,
        &[
            "pretrain",
            "--data",
            &path(root, "data/pretrain.jsonl"),
            "--out",
            "base",
            "--epochs",
            "1",
            "--d-model",
            "16",
        ],
    );
}

fn csv_column(file: &Path, column: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(file).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == column).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

fn sft(root: &Path, out: &str, extra: &[&str]) -> String {
    let init = path(root, "base/checkpoints/final");
    let data = path(root, "data/sft.jsonl");
    let mut args = vec![
        "train-sft",
        "--init",
        &init,
        "--data",
        &data,
        "--out",
        out,
        "--epochs",
        "2",
    ];
    args.extend_from_slice(extra);
    ok(root, &args)
}

#[test]
fn gen_data_refuses_overwrite_and_seed_changes_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["gen-data", "--out", "d1", "--seed", "1"]);
    for split in ["pretrain", "sft", "rl_prompts", "eval"] {
        assert!(root.join(format!("d1/{split}.jsonl")).is_file());
    }
    let again = eksft(root, &["gen-data", "--out", "d1", "--seed", "1"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(root, &["--force", "gen-data", "--out", "d1", "--seed", "1"]);
    ok(root, &["gen-data", "--out", "d2", "--seed", "2"]);
    let hashes = |d: &str| std::fs::read_to_string(root.join(d).join("hashes.json")).unwrap();
    let h1: serde_json::Value = serde_json::from_str(&hashes("d1")).unwrap();
    let h2: serde_json::Value = serde_json::from_str(&hashes("d2")).unwrap();
    assert_ne!(h1["sft"]["sha256"], h2["sft"]["sha256"]);
}

#[test]
fn usage_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["gen-data", "--out", "data"]);
    let missing = path(root, "nowhere/final");
    let out = eksft(
        root,
        &[
            "train-sft",
            "--method",
            "eksft",
            "--init",
            &missing,
            "--data",
            &path(root, "data/sft.jsonl"),
            "--out",
            "x",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&missing));

    let bad = root.join("bad.json");
    std::fs::write(&bad, r#"{"learning_rat": 1}"#).unwrap();
    let out = eksft(root, &["train-rl", "--config", bad.to_str().unwrap(), "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));

    let out = eksft(root, &["train-sft", "--method", "nonsense", "--out", "z"]);
    assert_eq!(out.status.code(), Some(2));
    let out = eksft(root, &["gen-data", "--out", "data2", "--seed", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eksft_at_zero_reduces_to_sft_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    fixture(root);
    sft(root, "sft", &["--method", "sft"]);
    sft(
        root,
        "ek0",
        &["--method", "eksft", "--rho", "0", "--lambda-h", "0", "--lambda-kl", "0"],
    );
    for col in ["loss", "ce_masked", "grad_norm"] {
        assert_eq!(
            csv_column(&root.join("sft/metrics.csv"), col),
            csv_column(&root.join("ek0/metrics.csv"), col),
            "column {col}"
        );
    }
    let weights = |d: &str| std::fs::read(root.join(d).join("checkpoints/final.weights.bin")).unwrap();
    assert_eq!(weights("sft"), weights("ek0"));
}

#[test]
fn run_is_reproducible_from_its_config() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    fixture(root);
    sft(root, "a", &["--method", "eksft", "--mask-dump"]);
    let config = path(root, "a/config.json");
    ok(root, &["train-sft", "--config", &config, "--out", "b"]);
    for file in [
        "config.json",
        "manifest.json",
        "metrics.csv",
        "reports/masks.csv",
        "reports/mask_dump.jsonl",
        "reports/drift.csv",
        "checkpoints/final.manifest.json",
        "checkpoints/final.weights.bin",
    ] {
        let read = |d: &str| std::fs::read(root.join(d).join(file)).unwrap();
        assert_eq!(read("a"), read("b"), "{file} differs");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["lambda_h"], 0.05);
    assert_eq!(manifest["config"]["train"]["rho"], 0.2);
    assert!(root.join("a/timing.json").is_file());
}

#[test]
fn rl_from_eksft_checkpoint_writes_reward_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    fixture(root);
    sft(root, "ek", &["--method", "eksft"]);
    let stdout = ok(
        root,
        &[
            "train-rl",
            "--init",
            &path(root, "ek/checkpoints/final"),
            "--prompts",
            &path(root, "data/rl_prompts.jsonl"),
            "--out",
            "rl",
            "--steps",
            "4",
            "--group-size",
            "4",
            "--prompts-per-step",
            "4",
        ],
    );
    assert!(stdout.contains("final reward"));
    let rewards = csv_column(&root.join("rl/metrics.csv"), "mean_reward");
    assert_eq!(rewards.len(), 4);
    assert!(rewards.iter().all(|r| (0.0..=1.0).contains(&r.parse::<f64>().unwrap())));
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("rl/config.json")).unwrap()).unwrap();
    assert_eq!(config["rl"]["clip_low"], 0.2);
    assert_eq!(config["rl"]["clip_high"], 0.28);
}

#[test]
fn eval_on_memorized_checkpoint_solves_training_prompts() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = root.join("spec.json");
    std::fs::write(&spec, r#"{"counts":{"pretrain":4,"sft":4,"rl":1,"eval":1},"seed":9}"#).unwrap();
    ok(root, &["gen-data", spec.to_str().unwrap(), "--out", "data"]);
    let data = path(root, "data/sft.jsonl");
    ok(
        root,
        &[
            "pretrain",
            "--data",
            &data,
            "--out",
            "mem",
            "--epochs",
            "150",
            "--batch-size",
            "4",
            "--lr",
            "0.003",
        ],
    );
    let stdout = ok(
        root,
        &[
            "eval",
            "--ckpt",
            &path(root, "mem/checkpoints/final"),
            "--data",
            &data,
            "--out",
            "ev",
            "--n",
            "16",
            "--ks",
            "1,16",
        ],
    );
    assert!(stdout.contains("pass@k"));
    let pass = csv_column(&root.join("ev/metrics.csv"), "pass_at_k");
    let p1: f64 = pass[0].parse().unwrap();
    assert!(p1 > 0.9, "pass@1 {p1} on memorized prompts");
    assert!(root.join("ev/reports/eval.json").is_file());
}

#[test]
fn analyzers_drift_iou_plots_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    fixture(root);
    let base = path(root, "base/checkpoints/final");
    ok(
        root,
        &["analyze", "drift", "--before", &base, "--after", &base, "--out", "same"],
    );
    let fractions = csv_column(&root.join("same/reports/drift.csv"), "fraction");
    assert!(fractions.iter().all(|f| f.parse::<f64>().unwrap() == 0.0));

    sft(root, "ek", &["--method", "eksft", "--mask-dump"]);
    let dump = path(root, "ek/reports/mask_dump.jsonl");
    let stdout = ok(root, &["analyze", "iou", "--dump", &dump, "--out", "iou"]);
    assert!(stdout.contains("reference"));
    let series = csv_column(&root.join("iou/reports/iou_series.csv"), "iou");
    let logged = csv_column(&root.join("ek/metrics.csv"), "mask_iou");
    let parse = |v: &[String]| v.iter().map(|s| s.parse::<f64>().unwrap()).collect::<Vec<_>>();
    assert_eq!(parse(&series), parse(&logged));

    let metrics = path(root, "ek/metrics.csv");
    let plot = |out: &str| {
        ok(
            root,
            &["analyze", "plots", "--sft", &format!("eksft={metrics}"), "--out", out],
        );
        std::fs::read_to_string(root.join(out).join("reports/sft_loss.svg")).unwrap()
    };
    let (p1, p2) = (plot("p1"), plot("p2"));
    assert_eq!(p1, p2);
    assert_eq!(p1.matches(r#"class="point""#).count(), logged.len());
    let missing = eksft(root, &["analyze", "plots", "--eval", &metrics, "--out", "p3"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("pass_at_k"));

    let eval = path(root, "data/eval.jsonl");
    let data = path(root, "data/sft.jsonl");
    ok(
        root,
        &[
            "analyze",
            "sweep",
            "--init",
            &base,
            "--data",
            &data,
            "--eval-data",
            &eval,
            "--out",
            "sweep",
            "--epochs",
            "1",
            "--n",
            "32",
        ],
    );
    let rhos = csv_column(&root.join("sweep/reports/sweep.csv"), "rho");
    assert_eq!(parse(&rhos), [0.0, 0.1, 0.2, 0.3, 0.4]);
}

#[test]
fn sweep_rho_zero_matches_plain_sft() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    fixture(root);
    let base = path(root, "base/checkpoints/final");
    let (eval, data) = (path(root, "data/eval.jsonl"), path(root, "data/sft.jsonl"));
    ok(
        root,
        &[
            "analyze",
            "sweep",
            "--init",
            &base,
            "--data",
            &data,
            "--eval-data",
            &eval,
            "--out",
            "sw",
            "--epochs",
            "2",
            "--rhos",
            "0",
            "--n",
            "32",
        ],
    );
    sft(root, "plain", &["--method", "sft"]);
    let sweep_loss = csv_column(&root.join("sw/reports/sweep.csv"), "final_loss");
    let sft_loss = csv_column(&root.join("plain/metrics.csv"), "loss");
    assert_eq!(sweep_loss[0], *sft_loss.last().unwrap());
}

#[test]
fn relative_outputs_land_under_the_run_root() {
    let tmp = tempfile::tempdir().unwrap();
    let root: PathBuf = tmp.path().join("nested/root");
    ok(&root, &["gen-data", "--out", "data"]);
    assert!(root.join("data/eval.jsonl").is_file());
}
