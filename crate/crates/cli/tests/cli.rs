use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn levex(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_levex"))
        .args(args)
        .env("LEVEX_OUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// One regime whose quadratic has no real root.
const COMPLEX_ONLY: &str = r#"{
  "regimes": [{ "mu": 1.0, "sigma": 0.2, "gamma": 0.0 }],
  "generator": [[0.0]],
  "levy": { "kind": "none" },
  "cost": { "beta": 0.1, "theta": 0.01, "K": 10.0, "r": 0.02 },
  "lambda": 0.5,
  "initial": { "x0": 1.0, "y0": 10000.0, "i0": 1 }
}"#;

/// Prices that overflow within a few years.
const EXPLODING: &str = r#"{
  "regimes": [{ "mu": 5000.0, "sigma": 0.2, "gamma": 0.0 }],
  "generator": [[0.0]],
  "levy": { "kind": "none" },
  "cost": { "beta": 0.1, "theta": 0.01, "K": 10.0, "r": 0.02 },
  "lambda": 0.001,
  "initial": { "x0": 1.0, "y0": 10000.0, "i0": 1 }
}"#;

#[test]
fn solve_printed_example1() {
    let dir = tempfile::tempdir().unwrap();
    let o = levex(dir.path(), &["solve", "example1", "--mode", "printed"]);
    assert_eq!(code(&o), 0);
    let sol = read_json(&dir.path().join("solution.json"));
    let a: Vec<f64> = sol["A"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((a[0] - 59.178).abs() < 1e-3 && (a[1] - 47.0599).abs() < 1e-3, "{a:?}");
    let roots = read_json(&dir.path().join("roots.json"));
    assert_eq!(roots["roots"]["roots"].as_array().unwrap().len(), 4);
    let text = stdout(&o);
    assert!(text.contains("4.40822") && text.contains("0.0120773"), "{text}");
    assert!(text.contains("V(x, y, 1) = 59.1782 x^2 - 0.01 y - 500"), "{text}");

    let manifest = read_json(&dir.path().join("solve.manifest.json"));
    let outputs: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(outputs.len(), 2);
    assert!(outputs.iter().all(|p| Path::new(p).exists()));
    assert_eq!(manifest["command"], "solve");
    assert_eq!(manifest["mode"], "printed");
}

#[test]
fn malformed_config_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"regimes": [], "generator": [], "levy": {"kind": "none"}, "cost": {"beta": 0.1}}"#).unwrap();
    let o = levex(dir.path(), &["solve", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("theta"), "{err}");

    let o = levex(dir.path(), &["solve", "example7"]);
    assert_eq!(code(&o), 2);
    let o = levex(dir.path(), &["solve"]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("solve.manifest.json").exists());
}

#[test]
fn invalid_model_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.json");
    fs::write(&cfg, COMPLEX_ONLY.replace("\"beta\": 0.1", "\"beta\": -0.1")).unwrap();
    let o = levex(dir.path(), &["solve", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("beta"));
}

#[test]
fn no_admissible_root_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("complex.json");
    fs::write(&cfg, COMPLEX_ONLY).unwrap();
    let o = levex(dir.path(), &["solve", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn curves_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&levex(dir.path(), &["solve", "example2"])), 0);
    let sol_path = dir.path().join("solution.json");
    let o = levex(dir.path(), &["curves", sol_path.to_str().unwrap(), "--y", "10000", "--x-max", "7.5"]);
    assert_eq!(code(&o), 0);
    let sol = read_json(&sol_path);
    let a: Vec<f64> = sol["A"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let (b, c) = (sol["B"].as_f64().unwrap(), sol["C"].as_f64().unwrap());

    let text = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert!(!text.contains('\r'));
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(reader.headers().unwrap(), vec!["x", "regime", "V"]);
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let x: f64 = rec[0].parse().unwrap();
        let i: usize = rec[1].parse().unwrap();
        let v: f64 = rec[2].parse().unwrap();
        let expect = a[i - 1] * x * x + b * 10000.0 + c;
        assert!((v - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        rows += 1;
    }
    assert_eq!(rows, 2 * 256);
}

#[test]
fn curves_printed_values_and_single_point() {
    let dir = tempfile::tempdir().unwrap();
    let o = levex(dir.path(), &["curves", "example1", "--mode", "printed", "--x-min", "1", "--x-max", "1"]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let v: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    // 59.178·1 − 500 to the accuracy of the published digits.
    assert!((v - (59.178 - 500.0)).abs() < 1e-3, "{v}");

    let o = levex(dir.path(), &["curves", "example1", "--x-min", "2", "--x-max", "1"]);
    assert_eq!(code(&o), 2);
    let o = levex(dir.path(), &["curves", "example1", "--points", "0"]);
    assert_eq!(code(&o), 2);
    let o = levex(dir.path(), &["curves", "example1", "--regimes", "3"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_policy_matches_the_anchor() {
    let dir = tempfile::tempdir().unwrap();
    let o = levex(dir.path(), &["simulate", "example1", "--policy", "zero", "--paths", "50", "--horizon", "100"]);
    assert_eq!(code(&o), 0);
    let est = read_json(&dir.path().join("estimate.json"));
    let mean = est["estimate"]["mean"].as_f64().unwrap();
    let expect = -(0.01 * 10000.0 + 10.0 / 0.02) * (1.0 - (-0.02f64 * 100.0).exp());
    assert!((mean - expect).abs() <= 1e-12 * expect.abs(), "{mean} vs {expect}");
    assert_eq!(est["estimate"]["std_error"].as_f64().unwrap(), 0.0);
}

#[test]
fn simulate_is_byte_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let mut payloads = Vec::new();
    for workers in ["1", "1", "4"] {
        let sub = dir.path().join(format!("w{}", payloads.len()));
        let args = ["simulate", "example2", "--paths", "40", "--horizon", "30", "--seed", "17", "--workers", workers, "--per-path"];
        assert_eq!(code(&levex(&sub, &args)), 0);
        payloads.push((fs::read(sub.join("estimate.json")).unwrap(), fs::read(sub.join("paths.csv")).unwrap()));
    }
    assert!(payloads.windows(2).all(|w| w[0] == w[1]));

    let est: Value = serde_json::from_slice(&payloads[0].0).unwrap();
    assert_eq!(est["sim"]["master_seed"], 17);
    assert_eq!(est["model"]["initial"]["i0"], 1);
    let text = String::from_utf8(payloads[0].1.clone()).unwrap();
    assert!(text.starts_with("path_index,payoff_sample\n"));
    assert_eq!(text.lines().count(), 41);
}

#[test]
fn euler_flags_and_clamp() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["simulate", "example1", "--dt", "0.05", "--paths", "50", "--horizon", "10", "--clamp", "0", "1"];
    assert_eq!(code(&levex(dir.path(), &args)), 0);
    let est = read_json(&dir.path().join("estimate.json"));
    assert_eq!(est["sim"]["scheme"]["kind"], "euler_grid");
    assert!(est["estimate"]["diagnostics"]["clamp_fraction"].as_f64().unwrap() > 0.0);

    let args = ["simulate", "example1", "--exact", "--clamp", "0", "1", "--paths", "5"];
    assert_eq!(code(&levex(dir.path(), &args)), 2);
    let args = ["simulate", "example1", "--dt", "0.1", "--exact"];
    assert_eq!(code(&levex(dir.path(), &args)), 2);
}

#[test]
fn overflowing_paths_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("boom.json");
    fs::write(&cfg, EXPLODING).unwrap();
    let args = ["simulate", cfg.to_str().unwrap(), "--policy", "constant", "--u0", "1", "--dt", "0.1", "--paths", "20", "--horizon", "50"];
    let o = levex(dir.path(), &args);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("simulate.manifest.json").exists());
}

#[test]
fn verify_formula_passes_and_printed_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = levex(dir.path(), &["verify", "example1", "--paths", "2000", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
    let report = read_json(&dir.path().join("verify.json"));
    assert_eq!(report["pass"], true);
    assert!(dir.path().join("verify.manifest.json").exists());

    let o = levex(dir.path(), &["verify", "example1", "--mode", "printed", "--paths", "200", "--seed", "1"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL HJB residual"));
}

#[test]
fn reproduce_prints_the_published_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let o = levex(dir.path(), &["reproduce", "1"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("4.40822") && stdout(&o).contains("0.0120773"));
    let o = levex(dir.path(), &["reproduce", "2"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("1.49362") && stdout(&o).contains("279.35"));
    assert!(dir.path().join("reproduce-2.json").exists());
}
