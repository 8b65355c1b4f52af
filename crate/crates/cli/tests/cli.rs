use std::path::Path;
use std::process::Command;

const CONFIG: &str = r#"
algorithm = "ceadmm"

[problem]
kind = "synthetic-regression"
m = 3
n = 5
d_range = [12, 20]
seed = 11

[hyperparams]
k0 = 1
"#;

fn fedadmm(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fedadmm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

#[test]
fn run_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    let out = fedadmm(&["run", "cfg.toml", "--out", "a"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/summary.json")).unwrap())
            .unwrap();
    let iterations = summary["iterations"].as_u64().unwrap() as usize;
    let trace = std::fs::read_to_string(dir.path().join("a/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), iterations + 2);

    let again = fedadmm(&["run", "cfg.toml", "--out", "b"], dir.path());
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(
        trace,
        std::fs::read_to_string(dir.path().join("b/trace.csv")).unwrap()
    );
}

#[test]
fn max_iters_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CONFIG.replace("k0 = 1", "k0 = 1\nmax_iters = 3");
    std::fs::write(dir.path().join("cfg.toml"), cfg).unwrap();
    let out = fedadmm(&["run", "cfg.toml", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_error_exits_three_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CONFIG.replace("k0 = 1", "k0 = 1\nstep = 9");
    std::fs::write(dir.path().join("cfg.toml"), cfg).unwrap();
    let out = fedadmm(&["run", "cfg.toml", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hyperparams"));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn sweep_writes_rounds_per_k0() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    let out = fedadmm(
        &[
            "sweep",
            "cfg.toml",
            "--k0",
            "1,4",
            "--repeats",
            "2",
            "--out",
            "s",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k0,mean_iterations,mean_rounds,mean_time_s");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("4,"));
}

#[test]
fn check_passes_under_theory_multiplier() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    let out = fedadmm(
        &["check", "cfg.toml", "--out", "c", "--seed", "5"],
        dir.path(),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("all checks passed"));
}
