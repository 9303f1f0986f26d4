//! The `rosetta-lab` binary end to end on a small config.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_rosetta-lab");

const SMALL: &str = r#"
[stream]
seed = 3

[adapt]
batches_per_corruption = 3

[pretrain]
epochs = 60

[episode]
corruptions = ["gaussian_noise", "blur_smooth"]

[sweep]
gamma1 = [1.0]
gamma2 = [0.01, 0.1]
tau = [0.0, 1.0]
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn config(dir: &Path, text: &str) -> String {
    let p = dir.join("lab.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_owned()
}

#[test]
fn pretrain_then_adapt_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let pre = dir.path().join("pre");
    run_ok(&["pretrain", "--config", &cfg, "--out", pre.to_str().unwrap()]);
    assert!(pre.join("model.ckpt").is_file());
    assert_eq!(header(&pre.join("metrics.csv")), "split,acc,auroc,fpr95,oscr,h_score,detector_acc");
    assert_eq!(fs::read_to_string(pre.join("diagnostics.jsonl")).unwrap().lines().count(), 60);

    let ckpt = pre.join("model.ckpt");
    let out = dir.path().join("adapt");
    run_ok(&[
        "adapt",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows[0], "corruption,acc,auroc,fpr95,oscr,h_score,detector_acc");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("gaussian_noise,"));
    assert!(rows[3].starts_with("mean,"));
    let diag = fs::read_to_string(out.join("diagnostics.jsonl")).unwrap();
    assert_eq!(diag.lines().count(), 6);
    let first: serde_json::Value = serde_json::from_str(diag.lines().next().unwrap()).unwrap();
    assert_eq!(first["sorted_logits_csid"].as_array().unwrap().len(), 16);
}

#[test]
fn every_subcommand_writes_its_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    for (cmd, first_key) in [("ablate", "mask"), ("sweep", "sweep"), ("audit-detectors", "detector")] {
        let out = dir.path().join(cmd);
        run_ok(&[cmd, "--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap()]);
        assert!(header(&out.join("metrics.csv")).starts_with(first_key), "{cmd}");
        assert!(out.join("diagnostics.jsonl").is_file(), "{cmd}");
    }
    let table = fs::read_to_string(dir.path().join("audit-detectors").join("detectors.csv")).unwrap();
    // header + five detectors
    assert_eq!(table.lines().count(), 6);
}

#[test]
fn unknown_config_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "[adapt]\nlearning_rate = 0.1\n");
    let out = run(&["adapt", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn oracle_partitioner_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "[adapt.partitioner]\ntag = \"oracle_best_threshold\"\nscore_kind = \"energy\"\n",
    );
    let out_dir = dir.path().join("never");
    let out = run(&["adapt", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!out_dir.exists());
}
