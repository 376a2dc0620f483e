use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{"corpus": {"labeled": 20, "unlabeled": 30, "dev": 10, "test": 10},
  "train": {"seed_schedule": {"warmup_steps": 10, "hold_steps": 20, "total_steps": 40},
            "student_schedule": {"warmup_steps": 10, "hold_steps": 20, "total_steps": 40},
            "batch_size": 4, "eval_every": 20}}"#;

fn gradmask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradmask"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.json");
    fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(gradmask(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        gradmask(&["train-seed", "--no-such-flag"]).status.code(),
        Some(1)
    );
    assert_eq!(gradmask(&["--help"]).status.code(), Some(0));
}

#[test]
fn validation_errors_exit_2_and_leave_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = out.to_str().unwrap();
    let r = gradmask(&["train-seed", "--mask-p", "0", "--out", o]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("mask_p"));
    let r = gradmask(&["eval", "--out", o]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
    let r = gradmask(&["train-seed", "--corpus", "/nonexistent.jsonl", "--out", o]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
    let r = gradmask(&["train-seed", "--ratio", "1-9", "--out", o]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn pipeline_outputs_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let dir = |n: &str| tmp.path().join(n).to_str().unwrap().to_string();

    assert!(
        gradmask(&["gen-data", "--config", &cfg, "--out", &dir("data")])
            .status
            .success()
    );
    let corpus = format!("{}/corpus.jsonl", dir("data"));
    assert!(gradmask(&[
        "train-seed",
        "--config",
        &cfg,
        "--corpus",
        &corpus,
        "--out",
        &dir("seed")
    ])
    .status
    .success());
    let ckpt = format!("{}/seed.ckpt", dir("seed"));
    let r = gradmask(&[
        "pseudo-label",
        "--config",
        &cfg,
        "--corpus",
        &corpus,
        "--checkpoint",
        &ckpt,
        "--out",
        &dir("pl"),
    ]);
    assert!(r.status.success());
    let pseudo = format!("{}/pseudo.jsonl", dir("pl"));
    assert!(gradmask(&[
        "train-student",
        "--config",
        &cfg,
        "--corpus",
        &pseudo,
        "--out",
        &dir("st")
    ])
    .status
    .success());
    // a corpus without pseudo labels cannot train a student
    let r = gradmask(&[
        "train-student",
        "--config",
        &cfg,
        "--corpus",
        &corpus,
        "--out",
        &dir("bad"),
    ]);
    assert_eq!(r.status.code(), Some(2));
    let r = gradmask(&[
        "eval",
        "--config",
        &cfg,
        "--corpus",
        &corpus,
        "--checkpoint",
        &ckpt,
        "--out",
        &dir("ev"),
    ]);
    assert!(r.status.success());
    assert!(String::from_utf8_lossy(&r.stdout).contains("dev WER"));

    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(format!("{}/manifest.json", dir("seed"))).unwrap(),
    )
    .unwrap();
    let summary: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(format!("{}/seed.summary.json", dir("seed"))).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["command"], "train-seed");
    assert_eq!(manifest["config_hash"], summary["config_hash"]);
    assert!(manifest["finished"].is_string());
    let steps = fs::read_to_string(format!("{}/seed.steps.csv", dir("seed"))).unwrap();
    assert_eq!(steps.lines().next(), Some("step,tag,loss"));
    assert_eq!(steps.lines().count(), 41);

    // the manifest alone reproduces the run
    let again = format!("{}/manifest.json", dir("seed"));
    assert!(gradmask(&[
        "train-seed",
        "--config",
        &again,
        "--corpus",
        &corpus,
        "--out",
        &dir("seed2")
    ])
    .status
    .success());
    assert_eq!(
        fs::read(format!("{}/seed.ckpt", dir("seed"))).unwrap(),
        fs::read(format!("{}/seed.ckpt", dir("seed2"))).unwrap()
    );
}

#[test]
fn sweep_and_iterate_formats() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("ns");
    let r = gradmask(&[
        "noise-sweep",
        "--config",
        &cfg,
        "--noise-rates",
        "0,0.3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success());
    let csv = fs::read_to_string(out.join("noise_sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "noise_rate,gm,wo_gm");
    assert_eq!(lines.len(), 3);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 3));

    let out = tmp.path().join("it");
    let r = gradmask(&[
        "iterate",
        "--config",
        &cfg,
        "--iters",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success());
    for f in [
        "seed.ckpt",
        "iter-1.ckpt",
        "iter-2.ckpt",
        "iterations.csv",
        "summary.json",
    ] {
        assert!(out.join(f).exists(), "{}", f);
    }
    assert_eq!(
        fs::read_to_string(out.join("iterations.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
}

#[test]
fn gradcheck_reports_every_suite() {
    let tmp = tempfile::tempdir().unwrap();
    let r = gradmask(&["gradcheck", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0));
    let text = String::from_utf8_lossy(&r.stdout);
    for suite in [
        "op/matmul",
        "rnnt",
        "model/supervised",
        "model/pseudo_masked",
    ] {
        assert!(text.contains(suite), "{}", suite);
    }
    assert!(!text.contains("FAIL"));
}
