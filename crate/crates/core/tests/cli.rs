use std::fs;
use std::process::Command;

fn cmuzero() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cmuzero"))
}

#[test]
fn selftest_succeeds() {
    let out = cmuzero().arg("selftest").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("transforms"), "{stdout}");
}

#[test]
fn train_then_eval_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    fs::write(
        &config,
        r#"{
  "env": "bandit",
  "total_steps": 20,
  "warmup_transitions": 16,
  "eval_interval": 10,
  "eval_episodes": 2,
  "checkpoint_interval": 10,
  "actors": { "actors": 1 },
  "search": { "num_simulations": 8 },
  "train": { "batch_size": 8 }
}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("run");
    let status = cmuzero()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--seed", "3", "--out"])
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());
    for name in ["train_metrics.csv", "eval_metrics.csv", "config.resolved.json", "checkpoint_10.json", "checkpoint_20.json"] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 3);
    let evals_before = fs::read_to_string(out_dir.join("eval_metrics.csv")).unwrap().lines().count();

    let out = cmuzero()
        .args(["eval", "--checkpoint"])
        .arg(out_dir.join("checkpoint_20.json"))
        .args(["--env", "bandit", "--episodes", "3", "--simulations", "8", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let evals_after = fs::read_to_string(out_dir.join("eval_metrics.csv")).unwrap().lines().count();
    assert_eq!(evals_after, evals_before + 1);
}

#[test]
fn bad_inputs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{ "env": "bandit", "learning_rate": 1.0 }"#).unwrap();
    let status = cmuzero().args(["train", "--config"]).arg(&config).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let status = cmuzero()
        .args(["eval", "--checkpoint"])
        .arg(dir.path().join("missing.json"))
        .args(["--env", "cartpole", "--episodes", "1", "--simulations", "4"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
