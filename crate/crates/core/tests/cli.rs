use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const TINY: &str = r#"{
  "train": {"steps": 6, "batch_size": 2},
  "model": {"gmf": {"unet": {"channels": [8, 8], "time_dim": 8}, "gol": {"channels": [2, 2, 2, 2, 2], "mapping_channels": 4}}},
  "sample": {"sampler": "ddim", "ddim_steps": 4}
}"#;

fn layerfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layerfit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run layerfit")
}

fn ok(args: &[&str]) {
    let out = layerfit(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(args: &[&str]) -> i32 {
    layerfit(args).status.code().expect("exit code")
}

fn digest(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn dir_digest(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), digest(p)))
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_is_deterministic_and_self_eval_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--count", "12"]);

    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(format!("run_{run}"));
        let inf = root.join(format!("inf_{run}"));
        ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--ablation", "gol+locc"]);
        ok(&["infer", "--checkpoint", s(&out.join("checkpoint.lft")), "--data", s(&data), "--out", s(&inf), "--seed", "3"]);
        hashes.push((digest(&out.join("checkpoint.lft")), dir_digest(&inf.join("gen"))));
    }
    assert_eq!(hashes[0], hashes[1]);
    assert!(!hashes[0].1.is_empty());

    let inf = root.join("inf_a");
    let ev = root.join("eval_self");
    ok(&["eval", "--gen", s(&inf.join("gt")), "--gt", s(&inf.join("gt")), "--masks", s(&inf.join("masks")), "--out", s(&ev)]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mean_lacd"].as_f64(), Some(0.0));
    assert!((report["mean_ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(ev.join("report.csv").exists());

    let ev = root.join("eval_gen");
    ok(&["eval", "--gen", s(&inf.join("gen")), "--gt", s(&inf.join("gt")), "--masks", s(&inf.join("masks")), "--out", s(&ev), "--norm", "raw"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert!(report["mean_lacd"].as_f64().unwrap() > 0.0);

    // corrupted checkpoint
    let bad = root.join("run_a").join("checkpoint.lft");
    std::fs::write(&bad, b"LFT1garbage").unwrap();
    assert_eq!(code(&["infer", "--checkpoint", s(&bad), "--data", s(&data), "--out", s(&root.join("x"))]), 4);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let missing = root.join("nope");

    assert_eq!(code(&["infer", "--checkpoint", s(&missing.join("c.lft")), "--data", s(&missing), "--out", s(&root.join("o"))]), 4);
    assert_eq!(code(&["eval", "--gen", s(&missing), "--gt", s(&missing), "--masks", s(&missing), "--out", s(&root.join("e"))]), 3);
    assert_eq!(code(&["train", "--data", s(&missing), "--out", s(&root.join("t"))]), 3);

    let cfg = root.join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"stepz": 3}}"#).unwrap();
    assert_eq!(code(&["gen-data", "--config", s(&cfg), "--out", s(&root.join("d"))]), 2);
    std::fs::write(&cfg, r#"{"eval": {"band_radius": 0}}"#).unwrap();
    assert_eq!(code(&["gen-data", "--config", s(&cfg), "--out", s(&root.join("d"))]), 2);
    assert_eq!(code(&["eval", "--gen", "a", "--gt", "b", "--masks", "c", "--out", "d", "--norm", "cubic"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
}

#[test]
fn gradcheck_reports_every_case() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("grad.json");
    let out = layerfit(&["gradcheck", "--seeds", "1", "--out", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.lines().filter(|l| l.starts_with("PASS")).count() > 20);
    assert!(!stderr.contains("FAIL"));
    assert!(report.exists());
}
