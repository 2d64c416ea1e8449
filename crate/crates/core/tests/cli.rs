use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

fn srkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srkit"))
        .args(args)
        .env_remove("SRKIT_SEED")
        .output()
        .expect("spawn srkit")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn row<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find(|l| l.split_whitespace().next() == Some(key))
        .unwrap_or_else(|| panic!("no `{key}` row in\n{text}"))
}

#[test]
fn round_sr_frequency() {
    let o = srkit(&["round", "1.001953125", "--mode", "sr", "--count", "100000"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let freq: f64 = row(&text, "sr_empirical").split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((freq - 0.25).abs() < 4.0 * (0.25f64 * 0.75 / 1e5).sqrt(), "{freq}");
    assert!(row(&text, "sr_p_up").ends_with("0.25"));
}

#[test]
fn round_nearest_exact_value() {
    let o = srkit(&["round", "1.0", "--mode", "nearest"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(row(&text, "nearest").contains("0x3F80"));
    assert!(row(&text, "delta").contains("floor == ceil"));
    assert!(!text.contains("sr_p_up"));
}

#[test]
fn round_hex_patterns() {
    let o = srkit(&["round", "0x3F804000", "--mode", "nearest"]);
    assert!(row(&stdout(&o), "input").ends_with("1.0019531"));
    let o = srkit(&["round", "0x3F81", "--mode", "nearest"]);
    assert!(row(&stdout(&o), "nearest").contains("0x3F81"));
}

#[test]
fn round_rejects_bad_input() {
    for v in ["nan", "inf", "pear", "0xZZ"] {
        let o = srkit(&["round", v, "--mode", "sr"]);
        assert_eq!(o.status.code(), Some(2), "{v}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn verify_rounding_passes() {
    let o = srkit(&["verify", "rounding"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["suite"], "rounding");
    assert_eq!(report["failures"], 0);
    assert!(report["checks"].as_array().unwrap().len() > 5);
}

#[test]
fn verify_bounds_reports_the_sweep() {
    let o = srkit(&["verify", "bounds"]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let check = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "sr_below_nr")
        .unwrap();
    assert_eq!(check["passed"], true);
    assert!(check["detail"].as_str().unwrap().contains("/100000"));
}

#[test]
fn injected_fault_fails_lemmas() {
    let o = srkit(&["verify", "lemmas", "--inject-fault", "xi-sign"]);
    assert_eq!(o.status.code(), Some(1));
    let clean = srkit(&["verify", "lemmas"]);
    assert_eq!(clean.status.code(), Some(0), "{}", stdout(&clean));
}

#[test]
fn help_lists_global_flags() {
    let o = srkit(&["--help"]);
    let text = stdout(&o);
    for flag in ["--config", "--out", "--seed", "--jobs", "--verbose", "SRKIT_SEED"] {
        assert!(text.contains(flag), "{flag}");
    }
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

const CONSTANTS: &str = r#"{"d": 1000, "R": 1, "L": 1, "F0_minus_Fstar": 1, "alpha": 0.001,
    "beta2": 0.95, "eps": 1e-8, "Delta": 0.0039, "T": 10000}"#;

#[test]
fn bound_sweep_to_stdout_and_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "b.json",
        &format!(r#"{{"constants": {CONSTANTS}, "axis": "Delta", "values": [0, 0.001, 0.01]}}"#),
    );
    let o = srkit(&["bound", "--config", &cfg]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    let header: Vec<&str> = lines[0].split(',').collect();
    let q = header.iter().position(|h| *h == "sr_quantization").unwrap();
    assert_eq!(lines[1].split(',').nth(q).unwrap().parse::<f64>().unwrap(), 0.0);

    let out = dir.path().join("bounds");
    let o = srkit(&["bound", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(out.join("bounds.csv")).unwrap(), text);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["kind"], "bound");
    assert_eq!(m["summary"]["nr_at_least_sr"], true);
}

#[test]
fn bound_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad_axis = write(
        dir.path(),
        "a.json",
        &format!(r#"{{"constants": {CONSTANTS}, "axis": "gamma", "values": [1]}}"#),
    );
    assert_eq!(srkit(&["bound", "--config", &bad_axis]).status.code(), Some(2));
    let bad_value = write(
        dir.path(),
        "b.json",
        &format!(r#"{{"constants": {CONSTANTS}, "axis": "beta2", "values": [0.9, 1.5]}}"#),
    );
    let o = srkit(&["bound", "--config", &bad_value]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("beta2[1]"));
    assert_eq!(srkit(&["bound"]).status.code(), Some(2));
    assert_eq!(srkit(&["bound", "--config", "/nonexistent/x.json"]).status.code(), Some(2));
}

#[test]
fn experiment_writes_csv_and_manifest_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "h.json",
        r#"{"kind": "hitting_time", "epsilon": [0.01], "repetitions": 2000, "seed": 5}"#,
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = srkit(&["experiment", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv_a = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.join("metrics.csv")).unwrap());
    let text = String::from_utf8(csv_a).unwrap();
    assert!(text.starts_with("experiment,repetition,step,metric,value\n"));
    let hits: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(hits.len(), 2000);
    let mean = hits.iter().sum::<f64>() / hits.len() as f64;
    let sd = (hits.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / (hits.len() - 1) as f64).sqrt();
    assert!((mean - 26.5).abs() < 3.0 * sd / (hits.len() as f64).sqrt(), "{mean}");

    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 5);
    assert_eq!(m["kind"], "hitting_time");
    assert_eq!(m["csv_columns"][0], "experiment");
    assert_eq!(m["spec"]["epsilon"][0], 0.01);
    assert!(!a.join("metrics.tmp").exists());
}

#[test]
fn seed_flag_and_env_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "h.json",
        r#"{"kind": "hitting_time", "epsilon": [0.1], "repetitions": 50, "seed": 5}"#,
    );
    let out = dir.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_srkit"))
        .args(["experiment", "--config", &cfg, "--out", out.to_str().unwrap()])
        .env("SRKIT_SEED", "77")
        .output()
        .unwrap();
    assert!(o.status.success());
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 77);
    let o = srkit(&["experiment", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "9", "--jobs", "1"]);
    assert!(o.status.success());
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
}

#[test]
fn experiment_validation_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "h.json", r#"{"kind": "hitting_time", "epsilon": [0.1, 0.7]}"#);
    let o = srkit(&["experiment", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epsilon[1]"));
    assert!(!dir.path().join("o").join("metrics.csv").exists());

    let cfg = write(dir.path(), "u.json", r#"{"kind": "warp_drive"}"#);
    assert_eq!(srkit(&["experiment", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn micro_train_grid_cardinality() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "t.json",
        r#"{"kind": "micro_train", "seed": 1,
            "model": {"type": "linear_regression", "dim": 8, "n_train": 256, "n_val": 64},
            "policies": ["bf16_sr", "bf16_nr", "fp32_master"],
            "lrs": [0.001, 0.01], "steps": 30, "batch": 8, "log_every": 10}"#,
    );
    let out = dir.path().join("o");
    let o = srkit(&["experiment", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let groups: BTreeSet<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(groups.len(), 6, "{groups:?}");
}
