use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_specsim"));
    // keep the caller's environment from leaking into flag defaults
    for (k, _) in std::env::vars() {
        if k.starts_with("SPECSIM_") {
            c.env_remove(k);
        }
    }
    c
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn error_doc(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr has an error document");
    serde_json::from_str(line).expect("error document is JSON")
}

#[test]
fn simulate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["simulate", "--config"])
        .arg(fixture("sample_trace.toml"))
        .args(["--policy", "fixed:3", "--scale", "1.2", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "fixed_3.summary.json",
        "fixed_3.steps.jsonl",
        "fixed_3.timeseries.csv",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("fixed_3.summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["policy"], "fixed:3");
    assert_eq!(summary["slo"]["scale"], 1.2);
    assert_eq!(summary["aggregates"]["requests"], 6);
}

#[test]
fn environment_mirrors_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("simulate")
        .env("SPECSIM_CONFIG", fixture("sample_trace.toml"))
        .env("SPECSIM_POLICY", "autoregressive")
        .env("SPECSIM_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("autoregressive.summary.json").is_file());
}

#[test]
fn config_errors_exit_2_with_error_document() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "policy = \"adaptive\"\nbogus = 1\n").unwrap();
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_doc(&out)["error"]["kind"], "config");

    let out = bin()
        .args(["simulate", "--config"])
        .arg(dir.path().join("missing.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin()
        .args(["simulate", "--config"])
        .arg(fixture("sample_trace.toml"))
        .args(["--scale", "-1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_trace_reports_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.csv");
    fs::write(
        &trace,
        "arrival_ms,category,input_tokens,output_tokens\n0,qa,10,5\nx,qa,10,5\n1,qa,0,5\n",
    )
    .unwrap();
    let out = bin()
        .args(["simulate", "--config"])
        .arg(fixture("sample_trace.toml"))
        .arg("--trace")
        .arg(&trace)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let doc = error_doc(&out);
    let lines: Vec<u64> = doc["error"]["details"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["line"].as_u64().unwrap())
        .collect();
    assert_eq!(lines, vec![3, 4]);
}

#[test]
fn sweep_emits_attainment_rows_per_scale() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["sweep", "--config"])
        .arg(fixture("sample_trace.toml"))
        .args([
            "--policies",
            "autoregressive,adaptive",
            "--jobs",
            "2",
            "--out-dir",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = fs::read_to_string(dir.path().join("attainment.csv")).unwrap();
    for policy in ["autoregressive", "adaptive"] {
        let scales: Vec<&str> = table
            .lines()
            .filter(|l| l.starts_with(&format!("{policy},")))
            .map(|l| l.split(',').nth(2).unwrap())
            .collect();
        assert_eq!(scales, vec!["0.8", "1", "1.2", "1.4"], "{policy}");
    }

    let cmp = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("compare")
        .arg(dir.path())
        .arg("--out-dir")
        .arg(cmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        fs::read_to_string(cmp.path().join("comparison.csv")).unwrap(),
        fs::read_to_string(dir.path().join("comparison.csv")).unwrap()
    );
}

#[test]
fn profile_recovers_fixture_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["profile", "--hidden"])
        .arg(fixture("coefficients.json"))
        .args(["--noise", "0", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let got: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("coefficients.json")).unwrap()).unwrap();
    let want: serde_json::Value =
        serde_json::from_slice(&fs::read(fixture("coefficients.json")).unwrap()).unwrap();
    for model in ["draft", "target"] {
        for k in ["alpha", "gamma", "delta"] {
            let (g, w) = (
                got[model][k].as_f64().unwrap(),
                want[model][k].as_f64().unwrap(),
            );
            assert!((g - w).abs() <= 1e-9 * w, "{model}.{k}: {g} vs {w}");
        }
    }
}

#[test]
fn validate_exits_zero() {
    let out = bin().arg("validate").output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 5);
}
