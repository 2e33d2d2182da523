use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vidrep"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(out: Output) -> serde_json::Value {
    serde_json::from_str(ok(out).trim()).unwrap()
}

#[test]
fn gen_train_rl_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("traj.jsonl");
    let dec = dir.path().join("dec.json");
    let log = dir.path().join("rl.csv");
    let lock = config("lock.toml");

    ok(bin().args(["gen-data", "--episodes", "2000", "--kind", "trajectory", "--seed", "7"]).arg("--config").arg(&lock).arg("--out").arg(&data).output().unwrap());
    let lines = std::fs::read_to_string(&data).unwrap().lines().count();
    assert_eq!(lines, 2001);

    // with a cyclic exogenous factor only the action-labelled objective is guaranteed the state
    for objective in ["forward", "contrastive", "auto", "acro"] {
        let v = json(
            bin().args(["train-rep", "--objective", objective]).arg("--config").arg(&lock).arg("--data").arg(&data).arg("--out").arg(&dec).output().unwrap(),
        );
        assert_eq!(v["objective"], objective);
        assert_eq!(v["class_size"], 23);
    }
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&dec).unwrap()).unwrap();
    assert_eq!(v["name"], "s:012");

    let v = json(bin().args(["rl", "--budget", "3000"]).arg("--config").arg(&lock).arg("--decoder").arg(&dec).arg("--out").arg(&log).output().unwrap());
    assert!((v["value"].as_f64().unwrap() - v["v_star"].as_f64().unwrap()).abs() < 1e-9, "{v}");
    let csv = std::fs::read_to_string(&log).unwrap();
    assert!(csv.starts_with("episode,return_true,return_presented"));
}

#[test]
fn video_data_rejects_acro() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("video.jsonl");
    let lock = config("lock.toml");
    ok(bin().args(["gen-data", "--episodes", "50"]).arg("--config").arg(&lock).arg("--out").arg(&data).output().unwrap());
    let out = bin().args(["train-rep", "--objective", "acro"]).arg("--config").arg(&lock).arg("--data").arg(&data).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("action"));
}

#[test]
fn population_training_on_the_two_chain_instance() {
    let v = json(bin().args(["train-rep", "--population", "--objective", "forward"]).arg("--config").arg(config("appc.toml")).output().unwrap());
    // three of four noisy bits track the exogenous chain, so the forward objective prefers it
    assert_eq!(v["decoder"], "xi:01", "{v}");
}

#[test]
fn margins_report_relations() {
    for c in ["lock.toml", "hard.toml", "appc.toml"] {
        let v = json(bin().arg("margins").arg("--config").arg(config(c)).output().unwrap());
        assert_eq!(v["relations"]["violations"].as_array().unwrap().len(), 0, "{c}");
    }
}

#[test]
fn brute_lower_matches_bound() {
    let v = json(bin().args(["brute-lower", "--d", "2"]).output().unwrap());
    assert!((v["min_max_suboptimality"].as_f64().unwrap() - 0.25).abs() < 1e-12, "{v}");
}

#[test]
fn suite_writes_report_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "suite = \"lower-bound\"\nseeds = [0]\n").unwrap();
    let text = ok(bin().arg("suite").arg("--config").arg(&cfg).arg("--out").arg(dir.path()).output().unwrap());
    assert!(text.contains("PASS criterion 4"), "{text}");
    assert!(text.contains("PASS criterion 5"), "{text}");
    let written: Vec<_> = std::fs::read_dir(dir.path()).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().is_dir()).collect();
    assert_eq!(written.len(), 1);
}

#[test]
fn unknown_suite_lists_valid_names() {
    let out = bin().args(["suite", "nope"]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("upper-bound") && err.contains("acro-comparison"), "{err}");
}

#[test]
fn missing_config_is_an_error() {
    let out = bin().arg("margins").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}
