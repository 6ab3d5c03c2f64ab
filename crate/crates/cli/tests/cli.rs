use std::path::Path;
use std::process::{Command, Output};

fn vsrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vsrl"))
        .args(args)
        .env_remove("VSRL_SEED")
        .output()
        .expect("binary runs")
}

fn short_run(out: &Path) -> Vec<String> {
    [
        "total_env_steps=8192",
        "eval.interval=3",
        "eval.episodes=2",
        "seeds=0",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("output_dir={}", out.display())])
    .flat_map(|s| ["-s".to_string(), s])
    .collect()
}

#[test]
fn unknown_key_is_a_config_error() {
    let out = vsrl(&["train", "-s", "algorithm.nonsense=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("algorithm.nonsense"));
}

#[test]
fn missing_files_are_io_errors() {
    assert_eq!(vsrl(&["train", "-c", "/nonexistent/run.cfg"]).status.code(), Some(3));
    assert_eq!(vsrl(&["diagnose", "/nonexistent/checkpoint.vsrl"]).status.code(), Some(3));
}

#[test]
fn diverging_run_exits_with_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train".to_string()];
    args.extend(short_run(dir.path()));
    args.extend(["-s", "value_lr=1e300", "-s", "max_grad_norm=1e300"].map(String::from));
    let out = vsrl(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));
    let status = std::fs::read_to_string(dir.path().join("seed_0/status.json")).unwrap();
    assert!(status.contains("failed"));
}

#[test]
fn train_report_and_diagnose_a_short_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train".to_string()];
    args.extend(short_run(dir.path()));
    let out = vsrl(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("seed_0");
    for f in ["config.txt", "metrics.jsonl", "checkpoint.vsrl", "status.json", "timing.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let csv = dir.path().join("eta.csv");
    let out = vsrl(&[
        "report",
        dir.path().to_str().unwrap(),
        "--quantity",
        "eta_abs_mean",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    // Eval at iteration 3 and after the last one (4), plus the header.
    let lines = std::fs::read_to_string(&csv).unwrap().lines().count();
    assert_eq!(lines, 1 + 2);
    assert!(dir.path().join("eta_aggregate.csv").exists());

    let diag = dir.path().join("diag");
    std::fs::create_dir(&diag).unwrap();
    let out = vsrl(&[
        "diagnose",
        run.join("checkpoint.vsrl").to_str().unwrap(),
        "--out",
        diag.to_str().unwrap(),
        "--eta-starts",
        "5",
        "--slice-points",
        "5",
        "--rollouts-per-point",
        "1",
        "--lyapunov-steps",
        "200",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("lyapunov exponent"));
    assert_eq!(std::fs::read_to_string(diag.join("slice.csv")).unwrap().lines().count(), 1 + 5);
    assert!(diag.join("eta.csv").exists());
}
