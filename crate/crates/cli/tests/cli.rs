use std::path::Path;
use std::process::{Command, Output};

fn ct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ct"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CONFIG: &str = r#"
label = "cli"
seeds = [0]

[sim]
n_train = 24
n_val = 8
n_test = 6
t_max = 8
tau_max = 2

[model]
d_h = 8
d_r = 8
n_fc = 8

[train]
epochs = 1
batch_size = 8
"#;

#[test]
fn simulate_train_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let sim_out = dir.path().join("sim");
    let o = ct(&[
        "simulate",
        "--seed",
        "4",
        "--out-dir",
        path(&sim_out),
        "--config",
        path(&cfg),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let data = sim_out.join("cli/gamma2/seed4/data");
    assert!(data.join("factual.csv").exists());

    let train_out = dir.path().join("train");
    let o = ct(&[
        "train",
        "--seed",
        "4",
        "--out-dir",
        path(&train_out),
        "--config",
        path(&cfg),
        "--data",
        path(&data),
        "--lr",
        "0.002",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "checkpoint.json",
        "train_log.jsonl",
        "msm_summary.json",
        "spec.json",
    ] {
        assert!(train_out.join(f).exists(), "{f} missing");
    }
    let spec = std::fs::read_to_string(train_out.join("spec.json")).unwrap();
    let spec: serde_json::Value = serde_json::from_str(&spec).unwrap();
    assert_eq!(spec["train"]["lr"], 0.002);
    assert_eq!(spec["sim"]["n_train"], 24);

    let eval_out = dir.path().join("eval");
    let o = ct(&[
        "evaluate",
        "--seed",
        "4",
        "--out-dir",
        path(&eval_out),
        "--config",
        path(&cfg),
        "--checkpoint",
        path(&train_out.join("checkpoint.json")),
        "--data",
        path(&data),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(eval_out.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().filter(|l| l.starts_with("cli,ct,")).count(),
        2
    );
}

#[test]
fn seed_and_out_dir_are_required() {
    let o = ct(&["simulate", "--out-dir", "x"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));
    let o = ct(&["train", "--seed", "1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--out-dir"));
}

#[test]
fn bad_overrides_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = ct(&[
        "simulate",
        "--seed",
        "1",
        "--out-dir",
        path(dir.path()),
        "--t-max",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = ct(&[
        "ablate",
        "--seed",
        "1",
        "--out-dir",
        path(dir.path()),
        "--variants",
        "bogus",
    ]);
    assert!(!o.status.success());
}

#[test]
fn verify_runs_selected_checks() {
    let dir = tempfile::tempdir().unwrap();
    let o = ct(&[
        "verify",
        "--seed",
        "0",
        "--out-dir",
        path(dir.path()),
        "--only",
        "9,10",
    ]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    assert_eq!(
        stdout
            .lines()
            .filter(|l| l.starts_with("criterion"))
            .count(),
        2
    );
    assert!(dir.path().join("verify.txt").exists());
}
