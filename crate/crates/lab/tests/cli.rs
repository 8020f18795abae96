use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpo-lab"))
        .args(args)
        .env_remove("TPO_MNIST_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn run_tabular(out: &Path, experiment: &str) -> Output {
    lab(&["run", experiment, "--steps", "5", "--seed-count", "2", "--out", out.to_str().unwrap()])
}

#[test]
fn run_writes_metrics_summary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ts");
    let o = run_tabular(&out, "tabular_single");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "step,episode,seed,method,error,grad_norm,all_fail_frac,extra");
    // 4 arms, 2 seeds, steps 0..=5
    assert_eq!(csv.lines().count(), 1 + 4 * 2 * 6);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "tabular_single");
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 8);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["arms"].as_array().unwrap().len(), 4);
    assert!(!out.join("parts").exists());
}

#[test]
fn summarize_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ts");
    assert!(run_tabular(&out, "tabular_single").status.success());
    let o = lab(&["summarize", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for arm in ["PG", "GRPO", "DG", "TPO"] {
        assert!(text.lines().any(|l| l.starts_with(arm)), "{text}");
    }
}

#[test]
fn summarize_refuses_mixed_experiments() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run_tabular(&a, "tabular_single").status.success());
    assert!(run_tabular(&b, "tabular_multi").status.success());
    let o = lab(&["summarize", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_configuration_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    assert_eq!(lab(&["run", "no_such_experiment", "--out", out]).status.code(), Some(2));
    assert_eq!(lab(&["run", "tabular_single", "--scale", "huge", "--out", out]).status.code(), Some(2));
    assert_eq!(
        lab(&["run", "terminal", "--methods", "DG", "--epochs", "4", "--out", out]).status.code(),
        Some(2)
    );
    assert_eq!(lab(&["run", "terminal", "--methods", "NOPE", "--out", out]).status.code(), Some(2));

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"horizon": 7, "learning_rate": 0.1}"#).unwrap();
    assert_eq!(
        lab(&["run", "terminal", "--config", cfg.to_str().unwrap(), "--out", out]).status.code(),
        Some(2)
    );
    std::fs::write(&cfg, r#"{"k": 1}"#).unwrap();
    assert_eq!(
        lab(&["run", "terminal", "--config", cfg.to_str().unwrap(), "--out", out]).status.code(),
        Some(2)
    );
}

#[test]
fn mnist_without_data_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let o = lab(&["run", "mnist", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mnist"));
}
