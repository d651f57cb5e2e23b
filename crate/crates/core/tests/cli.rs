use std::path::Path;
use std::process::{Command, Output};

fn valueflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_valueflow"))
        .args(args)
        .env_remove("VALUEFLOW_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--set", "iterations=3", "--set", "rollout_steps=32", "--set", "critic_batch=32",
    "--set", "head_hidden=16,16", "--set", "eval_every=0",
];

fn train_into(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out-dir", dir.to_str().unwrap()];
    args.extend(SMALL);
    args.extend(extra);
    valueflow(&args)
}

#[test]
fn verify_passes() {
    let o = valueflow(&["verify", "--instances", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("PASS") && !out.contains("FAIL"), "{out}");
}

#[test]
fn bad_config_names_the_key_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "alpha = 1.5\n").unwrap();
    let o = valueflow(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alpha"), "{}", stderr(&o));

    let o = valueflow(&["train", "--set", "bogus=1", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn unknown_subcommand_fails() {
    let o = valueflow(&["frobnicate"]);
    assert!(!o.status.success());
}

#[test]
fn repeated_training_writes_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train_into(&a, &[]).status.success());
    assert!(train_into(&b, &[]).status.success());
    let read = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert!(a.join("final.ckpt").exists() && a.join("config.cfg").exists());
}

#[test]
fn export_flow_writes_every_trajectory_point() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train_into(&run, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("export");
    let ckpt = run.join("final.ckpt");
    let o = valueflow(&[
        "export-flow", "--checkpoint", ckpt.to_str().unwrap(), "--out-dir", out.to_str().unwrap(),
        "--state-index", "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let dump = std::fs::read_to_string(out.join("flow_dump.jsonl")).unwrap();
    let lines: Vec<&str> = dump.lines().collect();
    assert_eq!(lines.len(), 50 * 51);
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    for key in ["state", "k", "t", "z", "v"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(first["state"], 1);

    let quantiles = std::fs::read_to_string(out.join("quantiles.csv")).unwrap();
    assert_eq!(quantiles.lines().count(), 51);
    let grid = std::fs::read_to_string(out.join("velocity_grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 41 * 51);
    assert!(out.join("histogram.csv").exists());
}

#[test]
fn eval_prints_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_into(dir.path(), &[]).status.success());
    let ckpt = dir.path().join("final.ckpt");
    let o = valueflow(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "3", "--ood"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&o.stdout).trim()).unwrap();
    assert_eq!(v["episodes"], 3);
    assert_eq!(v["ood"], true);
    let o = valueflow(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resume_from_cli_matches_direct_run() {
    let dir = tempfile::tempdir().unwrap();
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    assert!(train_into(&full, &["--set", "iterations=4"]).status.success());
    assert!(train_into(&split, &["--set", "iterations=2"]).status.success());
    let ckpt = split.join("final.ckpt");
    let o = train_into(&split, &["--set", "iterations=4", "--resume", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&full, "metrics.csv"), read(&split, "metrics.csv"));
    assert_eq!(read(&full, "final.ckpt"), read(&split, "final.ckpt"));
}

#[test]
fn ablation_continues_past_a_failing_cell() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = dir.path().join("m.txt");
    std::fs::write(&matrix, "good: K=20\nbroken: K=0\nalso-good: mode=scalar\n").unwrap();
    let out = dir.path().join("abl");
    let mut args = vec!["ablate", "--matrix", matrix.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
    args.extend(SMALL);
    let o = valueflow(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows.len(), 4, "{summary}");
    assert!(rows[1].starts_with("good,ok,"));
    assert!(rows[2].starts_with("broken,failed,"));
    assert!(rows[3].starts_with("also-good,ok,"));
}

#[test]
fn empty_ablation_matrix_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = dir.path().join("m.txt");
    std::fs::write(&matrix, "# nothing here\n").unwrap();
    let out = dir.path().join("abl");
    let o = valueflow(&["ablate", "--matrix", matrix.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1);
    assert!(summary.starts_with("cell,status,final_clean_return"));
}
