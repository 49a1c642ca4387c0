use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn jtp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jtp")).args(args).output().unwrap()
}

fn config(name: &str) -> String {
    format!("{}/configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn schema(name: &str) -> Value {
    let path = format!("{}/schemas/{name}.schema.json", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_valid(schema_name: &str, doc: &Value) {
    let validator = jsonschema::validator_for(&schema(schema_name)).unwrap();
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{schema_name}: {errors:?}");
}

fn run_ok(cmd: &str, cfg: &str, out: &Path, extra: &[&str]) {
    let mut args = vec![cmd, "--config", cfg, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = jtp(&args);
    assert!(
        o.status.success(),
        "{cmd} {cfg}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn simulate_mean_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    run_ok("simulate", &config("constant.json"), dir.path(), &[]);
    let est = read_json(&dir.path().join("estimates.json"));
    assert_valid("estimates", &est);
    // Symmetric telegraph, c = ±1, λ = 1: E X_0(1) = (1 - e^{-2}) / 2.
    let want = (1.0 - (-2.0f64).exp()) / 2.0;
    let at1 = &est["estimates"][1];
    assert_eq!(at1["time"], 1.0);
    let m = at1["mean"]["value"].as_f64().unwrap();
    let se = at1["mean"]["std_error"].as_f64().unwrap();
    assert!((m - want).abs() < 3.0 * se, "{m} vs {want} (se {se})");
    let atom = at1["no_switch"]["value"].as_f64().unwrap();
    let atom_se = at1["no_switch"]["std_error"].as_f64().unwrap();
    assert!((atom - (-1.0f64).exp()).abs() < 3.0 * atom_se);
    let reference = est["volterra_reference"][1]["mean"].as_f64().unwrap();
    assert!((reference - want).abs() < 1e-6);
    let csv = fs::read_to_string(dir.path().join("paths.csv")).unwrap();
    assert!(csv.starts_with("path,switch,time,state,sojourn,jump,position\r\n"));
}

#[test]
fn repeated_seed_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_ok("simulate", &config("memory.json"), a.path(), &["--paths", "4000"]);
    run_ok("simulate", &config("memory.json"), b.path(), &["--paths", "4000"]);
    for f in ["paths.csv", "estimates.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    run_ok("simulate", &config("memory.json"), c.path(), &["--paths", "4000", "--seed", "99"]);
    assert_ne!(
        fs::read(a.path().join("paths.csv")).unwrap(),
        fs::read(c.path().join("paths.csv")).unwrap()
    );
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let runs: [(&str, &str, &[&str], &[&str]); 5] = [
        ("simulate", "memory.json", &["--paths", "6000"], &["paths.csv", "estimates.json"]),
        ("density", "jumps.json", &["--paths", "6000"], &["density.csv", "density.json"]),
        ("moments", "memory.json", &["--dt", "0.02"], &["moments.csv", "moments.json"]),
        ("check", "calibrated.json", &[], &["balance.json", "check.json"]),
        ("girsanov", "girsanov.json", &["--paths", "6000"], &["girsanov.csv", "girsanov.json"]),
    ];
    for (cmd, cfg, extra, files) in runs {
        let mut outputs: Vec<Vec<Vec<u8>>> = Vec::new();
        for threads in ["1", "4", "8"] {
            let dir = tempfile::tempdir().unwrap();
            let mut args = extra.to_vec();
            args.extend_from_slice(&["--threads", threads]);
            run_ok(cmd, &config(cfg), dir.path(), &args);
            outputs.push(files.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect());
        }
        assert_eq!(outputs[0], outputs[1], "{cmd}: 1 vs 4 threads");
        assert_eq!(outputs[0], outputs[2], "{cmd}: 1 vs 8 threads");
    }
}

#[test]
fn density_reports_l1_and_atom() {
    let dir = tempfile::tempdir().unwrap();
    run_ok("density", &config("constant.json"), dir.path(), &[]);
    let d = read_json(&dir.path().join("density.json"));
    assert_valid("density", &d);
    assert!(d["l1_distance"].as_f64().unwrap() < 0.02);
    assert_eq!(d["support_covered"], true);
    assert_eq!(d["atom"]["location"], 1.0);
    let csv = fs::read_to_string(dir.path().join("density.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "x,analytic,monte_carlo,abs_diff");
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first.len(), 4);
    // 17 significant digits round-trip the grid point exactly.
    assert_eq!(first[0], "-9.7999999999999998e-1");
    assert_eq!(first[0].parse::<f64>().unwrap(), -0.98);
}

#[test]
fn narrow_density_grid_warns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"model": {"kind": "constant", "c": [1, -1], "h": [0, 0], "lambda": [1, 1]},
            "density": {"t": 1.0, "x_grid": {"from": -0.5, "to": 0.5, "points": 21}, "paths": 2000}}"#,
    );
    run_ok("density", cfg.to_str().unwrap(), dir.path(), &[]);
    let d = read_json(&dir.path().join("density.json"));
    assert_eq!(d["support_covered"], false);
    let warnings = d["warnings"].as_array().unwrap();
    assert!(warnings.iter().any(|w| w.as_str().unwrap().contains("does not cover")));
}

#[test]
fn density_at_time_zero_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"model": {"kind": "constant", "c": [1, -1], "h": [0, 0], "lambda": [1, 1]},
            "density": {"t": 0.0, "x_grid": [-1, 0, 1]}}"#,
    );
    let o = jtp(&["density", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("density.t"));
}

#[test]
fn invalid_family_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"model": {"kind": "calibrated",
            "sojourn": [{"family": "weibull", "lambda": 1, "alpha": -2}, {"family": "exponential", "lambda": 1}],
            "amplitude": [1, -1]},
            "check": {"horizon": 1}}"#,
    );
    let o = jtp(&["check", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("alpha") && err.contains("-1"), "{err}");
}

#[test]
fn malformed_config_names_field_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "{\n  \"model\": {\"kind\": \"constant\", \"c\": [1, -1], \"h\": [0, 0], \"lambda\": [1, 1]},\n  \"simulate\": {\"horizon\": \"long\"}\n}",
    );
    let o = jtp(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("simulate.horizon") && err.contains("line 3"), "{err}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(jtp(&["simulate"]).status.code(), Some(1));
    assert_eq!(jtp(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(jtp(&["simulate", "--config", "x.json", "--threads", "0"]).status.code(), Some(1));
    assert_eq!(jtp(&["--help"]).status.code(), Some(0));
}

#[test]
fn numerical_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"model": {"kind": "general", "velocity": [1, -1], "jump": [0, 0],
            "sojourn": [{"family": "pareto", "lambda": 1.5, "b": 0.5}, {"family": "exponential", "lambda": 1}]},
            "moments": {"order": 2, "horizon": 1.0, "dt": 0.01}}"#,
    );
    let o = jtp(&["moments", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda > 2"));
}

#[test]
fn calibrated_check_and_moments() {
    let dir = tempfile::tempdir().unwrap();
    run_ok("check", &config("calibrated.json"), dir.path(), &[]);
    let balance = read_json(&dir.path().join("balance.json"));
    assert_valid("balance", &balance);
    assert_eq!(balance["is_martingale"], true);
    let check = read_json(&dir.path().join("check.json"));
    assert_valid("check", &check);
    assert_eq!(check["mean_is_zero"], true);

    run_ok("moments", &config("calibrated.json"), dir.path(), &[]);
    let summary = read_json(&dir.path().join("moments.json"));
    assert_valid("moments", &summary);
    assert!(summary["variance_cross_check"].as_f64().unwrap() < 1e-8);
    let csv = fs::read_to_string(dir.path().join("moments.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,mu0_1,mu1_1,mu0_2,mu1_2,var0,var1");
    for line in lines {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        assert!(v[1].abs() < 1e-6 && v[2].abs() < 1e-6, "{line}");
    }
}

#[test]
fn sojourn_dependent_model_reports_conditional_gap() {
    let dir = tempfile::tempdir().unwrap();
    run_ok("moments", &config("memory.json"), dir.path(), &[]);
    let summary = read_json(&dir.path().join("moments.json"));
    assert_eq!(summary["previous_sojourn_dependent"], true);
    assert!(summary["conditional_mean_gap"].as_f64().unwrap() > 1e-3);
    let header = fs::read_to_string(dir.path().join("moments.csv")).unwrap();
    assert!(header.lines().next().unwrap().ends_with("mean0_conditional,mean1_conditional"));
}

#[test]
fn girsanov_reports_side_by_side_means() {
    let dir = tempfile::tempdir().unwrap();
    run_ok("girsanov", &config("girsanov.json"), dir.path(), &[]);
    let g = read_json(&dir.path().join("girsanov.json"));
    assert_valid("girsanov", &g);
    for e in g["estimates"].as_array().unwrap() {
        let w = &e["weight_mean"];
        assert!((w["value"].as_f64().unwrap() - 1.0).abs() < 3.0 * w["std_error"].as_f64().unwrap());
        let m = &e["weighted_mean"];
        assert!(m["value"].as_f64().unwrap().abs() < 3.0 * m["std_error"].as_f64().unwrap());
    }
    let csv = fs::read_to_string(dir.path().join("girsanov.csv")).unwrap();
    assert!(csv.starts_with("t,weight_mean,weight_std_error,weighted_mean,weighted_std_error,unweighted_mean,unweighted_std_error"));
}

#[test]
fn girsanov_needs_exponential_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"model": {"kind": "calibrated", "sojourn": [{"family": "logistic", "lambda": 1}, {"family": "exponential", "lambda": 1}],
            "amplitude": [1, -1]}, "girsanov": {"target": [1, 1], "times": [1]}}"#,
    );
    let o = jtp(&["girsanov", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_configs_validate() {
    let dir = format!("{}/configs", env!("CARGO_MANIFEST_DIR"));
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let doc = read_json(&path);
        assert_valid("config", &doc);
        jumptel_cli::config::parse(&fs::read_to_string(&path).unwrap()).unwrap();
        n += 1;
    }
    assert!(n >= 5);
}

#[test]
fn schema_rejects_bad_config() {
    let bad: Value = serde_json::from_str(r#"{"model": {"kind": "constant", "c": [1, -1], "h": [0, 0]}}"#).unwrap();
    let validator = jsonschema::validator_for(&schema("config")).unwrap();
    assert!(!validator.is_valid(&bad));
}
