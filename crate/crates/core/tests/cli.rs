//! End-to-end runs of the `xanat` binary: exit codes and file contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xanat::model::ModelParams;
use xanat::synth::{cohort_checksum, generate_cohort, read_cohort, CohortConfig};
use xanat::trainer::initial_params;

const DEFAULT_COHORT_SHA256: &str = "e323698e482df5c871a1f56081a498112f9e65fd59ffe9463ff29ce33e6db060";

fn xanat(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xanat"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn xanat")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_default_is_frozen_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let o = xanat(dir.path(), &["--seed", "1", "synth"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let path = dir.path().join("cohort.jsonl");
    let first = std::fs::read(&path).unwrap();
    assert_eq!(cohort_checksum(&read_cohort(&path).unwrap()).unwrap(), DEFAULT_COHORT_SHA256);
    assert_eq!(code(&xanat(dir.path(), &["--seed", "1", "synth"])), 0);
    assert_eq!(std::fs::read(&path).unwrap(), first);
    let manifest = json(&dir.path().join("manifest-synth.json"));
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 1);
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[cohort]\nn_patients = 0\n");
    let o = xanat(dir.path(), &["--config", cfg.to_str().unwrap(), "synth"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("n_patients"), "{}", stderr(&o));
    assert!(!dir.path().join("cohort.jsonl").exists());

    let cfg = write_config(dir.path(), "[cohort]\nno_such_key = 1\n");
    assert_eq!(code(&xanat(dir.path(), &["--config", cfg.to_str().unwrap(), "synth"])), 2);
    assert_eq!(code(&xanat(dir.path(), &["train", "--pooling", "max"])), 2);
    assert_eq!(code(&xanat(dir.path(), &["no-such-command"])), 2);
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for args in [&["--dry-run", "synth"][..], &["--dry-run", "train"], &["--dry-run", "eval"]] {
        let o = xanat(&out, args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("[cohort]"));
    }
    assert!(!out.exists() || std::fs::read_dir(&out).unwrap().next().is_none());
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let o = xanat(dir.path(), &["--seed", "1", "train", "--epochs", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let saved = ModelParams::load(&dir.path().join("checkpoint.json")).unwrap();
    let cohort = generate_cohort(&CohortConfig::default()).unwrap();
    assert_eq!(saved, initial_params(&cohort, 1).unwrap());
    assert!(std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap().is_empty());
}

#[test]
fn no_global_trace_has_no_global_loss() {
    let dir = tempfile::tempdir().unwrap();
    let o = xanat(dir.path(), &["train", "--no-global", "--max-steps", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 5);
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("loss_global").is_none(), "{line}");
        let local: f64 = v["loss_local"].as_array().unwrap().iter().filter_map(|x| x.as_f64()).sum();
        assert!((v["loss_total"].as_f64().unwrap() - local).abs() <= 1e-12);
    }

    let o = xanat(dir.path(), &["train", "--max-steps", "5"]);
    assert_eq!(code(&o), 0);
    let trace = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert!(trace.lines().all(|l| l.contains("\"loss_global\"")));
}

#[test]
fn untrained_eval_is_near_chance_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&xanat(dir.path(), &["--seed", "1", "eval"])), 0);
    let path = dir.path().join("metrics.json");
    let first = std::fs::read(&path).unwrap();
    let auc = json(&path)["aggregate"]["auc"]["mean"].as_f64().unwrap();
    assert!((0.35..=0.65).contains(&auc), "{auc}");
    assert_eq!(code(&xanat(dir.path(), &["--seed", "1", "eval"])), 0);
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert!(std::fs::read_to_string(dir.path().join("metrics.csv"))
        .unwrap()
        .starts_with("class,template,metric,value\n"));
}

#[test]
fn eval_rejects_missing_or_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = xanat(dir.path(), &["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));

    let small = write_config(dir.path(), "[cohort]\ndim = 16\n");
    let o = xanat(dir.path(), &["--config", small.to_str().unwrap(), "train", "--epochs", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = dir.path().join("checkpoint.json");
    let o = xanat(dir.path(), &["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("D=16"), "{}", stderr(&o));
}

#[test]
fn diagnose_reports_collapse_of_untrained_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = xanat(dir.path(), &["--seed", "1", "diagnose", "--bins", "20"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = json(&dir.path().join("collapse.json"));
    let frac = summary["text"]["collapse"]["inter_fraction_above_0_9"].as_f64().unwrap();
    assert!(frac >= 0.8, "{frac}");
    let hist = std::fs::read_to_string(dir.path().join("text_histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 21);
    assert!(dir.path().join("projection.csv").exists());
}

#[test]
fn gradcheck_passes_and_validates_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let o = xanat(dir.path(), &["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json(&dir.path().join("gradcheck.json"));
    assert_eq!(report["pass"], true);
    assert_eq!(report["cases"].as_array().unwrap().len(), 10);
    assert_eq!(code(&xanat(dir.path(), &["gradcheck", "--configs", "0"])), 2);
}

#[test]
fn numerical_blow_up_exits_3_with_payload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nlearning_rate = 1e300\nclip_norm = 1e300\n");
    let o = xanat(dir.path(), &["--config", cfg.to_str().unwrap(), "train", "--max-steps", "10"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let abort = json(&dir.path().join("abort.json"));
    assert!(abort["step"].as_u64().unwrap() >= 1);
    assert!(abort["detail"].as_str().unwrap().contains("log_tau"));
    assert!(!dir.path().join("checkpoint.json").exists());
}

#[test]
fn ablation_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = xanat(dir.path(), &["ablation", "--max-steps", "10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(rows[0].starts_with("config,auc_mean,auc_std"));
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["LCA", "LCA+GCA", "LCA+CTA", "LCA+CTA+GCA"]);
}
