use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_irl-track"))
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn short_config(dir: &Path, seconds: f64) -> PathBuf {
    let text = std::fs::read_to_string(configs().join("paper.json")).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["sim"]["duration"] = seconds.into();
    let path = dir.join("short.json");
    std::fs::write(&path, value.to_string()).unwrap();
    path
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn run_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), 1.0);
    let out_dir = dir.path().join("run");
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("run.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1002);
    assert!(csv.starts_with("t,x1,x2,x1d,x2d,u,z1,z2,e_hjb,sigma,xi,W1,"));
    assert!(out_dir.join("metrics.json").exists());

    std::fs::remove_file(out_dir.join("plot.py")).unwrap();
    let out = bin().arg("plot").arg("--run").arg(&out_dir).output().unwrap();
    assert_eq!(code(&out), 0);
    assert!(out_dir.join("plot.py").exists());
}

#[test]
fn config_and_io_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", "--config", "/nonexistent/config.json", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 1, "critic": {"gama": 0.1}}"#).unwrap();
    let out = bin()
        .args(["run", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("critic.gama"));

    std::fs::write(&bad, r#"{"schema_version": 1, "critic": {"K2": 0}}"#).unwrap();
    let out = bin()
        .args(["run", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda_min"));

    let out = bin()
        .arg("plot")
        .arg("--run")
        .arg(dir.path().join("missing"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);

    std::fs::write(dir.path().join("run.csv"), "").unwrap();
    let out = bin().arg("plot").arg("--run").arg(dir.path()).output().unwrap();
    assert_eq!(code(&out), 2);

    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn numerical_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("diverge.json");
    std::fs::write(
        &cfg,
        r#"{"schema_version": 1,
            "plant": {"schedule": [{"start": 0, "params": {"mass": 1, "spring": 3, "damping": 0.5}}]},
            "identifier": {"N": 4, "W_init": [[0, 0], [0, 0], [0, 0], [0, 0.5]]},
            "critic": {"gamma": 1.0, "l": 1.0, "K2": 0.005, "Q": 1.0},
            "sim": {"duration": 5.0, "probe": {"enabled": true, "amplitude": 0.3, "frequencies": [1.1, 2.3, 3.7]}}}"#,
    )
    .unwrap();
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("at step"));
}

#[test]
fn ablate_with_worker_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), 1.0);
    let variants = dir.path().join("variants.json");
    std::fs::write(
        &variants,
        r#"{"variants": [{"name": "no_er", "overrides": {"identifier": {"er_enabled": false}}},
                         {"name": "broken", "overrides": {"critic": {"K2": 0.0}}}]}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("ablate");
    let out = bin()
        .env("IRL_TRACK_WORKERS", "2")
        .args(["ablate", "--config"])
        .arg(&cfg)
        .arg("--variants")
        .arg(&variants)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(out_dir.join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("base,ok,"));
    assert!(lines[2].starts_with("no_er,ok,"));
    assert!(lines[3].starts_with("broken,error:"));

    let out = bin()
        .env("IRL_TRACK_WORKERS", "zero")
        .args(["ablate", "--config"])
        .arg(&cfg)
        .arg("--variants")
        .arg(&variants)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}
