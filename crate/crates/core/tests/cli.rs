use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hybrid-vp"))
}

fn write_config(dir: &std::path::Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.in.json");
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn estimate_writes_artifacts_and_prints_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"horizon": 300, "seed": 3}"#);
    let out = tmp.path().join("run");
    let res = bin().args(["estimate", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.contains("\"accuracy\""));
    for f in ["trajectory.csv", "convergence.csv", "report.json", "config.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn simulate_prints_csv_without_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"horizon": 50, "model": "nonlinear", "mode_init": "A"}"#);
    let res = bin().args(["simulate", "--config"]).arg(&cfg).output().unwrap();
    assert!(res.status.success());
    let stdout = String::from_utf8(res.stdout).unwrap();
    let mut lines = stdout.lines();
    assert!(lines.next().unwrap().ends_with("mode_est,w_tilde_1,w_tilde_2"));
    assert_eq!(lines.count(), 50);
}

#[test]
fn bad_inputs_exit_with_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"horizon": 300, "unknown_knob": 1}"#);
    let res = bin().args(["estimate", "--config"]).arg(&cfg).output().unwrap();
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("unknown_knob"));

    let res = bin().args(["ablation", "bogus", "--out"]).arg(tmp.path()).output().unwrap();
    assert!(!res.status.success());
}

#[test]
fn selfcheck_passes() {
    let res = bin().arg("selfcheck").output().unwrap();
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(res.status.success(), "{stdout}");
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
}
