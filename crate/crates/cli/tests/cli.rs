use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str], stdin: Option<&str>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_foliwill"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut pipe = child.stdin.take().unwrap();
    if let Some(s) = stdin {
        pipe.write_all(s.as_bytes()).unwrap();
    }
    drop(pipe);
    child.wait_with_output().unwrap()
}

fn run_config(cmd: &str, config: &str, out: &Path) -> Output {
    run(&[cmd, "--config", "-", "--out-dir", out.to_str().unwrap()], Some(config))
}

fn report(out: &Path, cmd: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join(format!("{cmd}.json"))).unwrap()).unwrap()
}

fn result(rep: &Value, name: &str) -> f64 {
    rep["results"].as_array().unwrap().iter().find(|r| r["name"] == name).unwrap()["value"].as_f64().unwrap()
}

fn columns(path: &Path) -> Vec<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut cols = vec![Vec::new(); r.headers().unwrap().len()];
    for rec in r.records() {
        for (c, v) in cols.iter_mut().zip(rec.unwrap().iter()) {
            c.push(v.parse().unwrap());
        }
    }
    cols
}

#[test]
fn profile_family_writes_curves_and_passes() {
    let dir = TempDir::new().unwrap();
    let out = run(&["profile", "--out-dir", dir.path().to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = report(dir.path(), "profile");
    assert_eq!(rep["command"], "profile");
    assert!(rep["timing"]["total_s"].as_f64().unwrap() < 10.0);
    for p in 2..=8 {
        let csv = dir.path().join(format!("profile_p{p}.csv"));
        let text = fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("rho,f,fprime,k1,kn\n"));
        assert!(!text.contains('\r'));
        let cols = columns(&csv);
        for (k1, kn) in cols[3].iter().zip(&cols[4]) {
            assert!((kn - (p as f64 - 1.0) * k1).abs() < 1e-8);
        }
        assert!(result(&rep, &format!("ode_vs_closed_p{p}")) < 1e-6);
    }
    let svg = fs::read_to_string(dir.path().join("profile.svg")).unwrap();
    assert_eq!(svg.matches("<path").count(), 7);
}

#[test]
fn profile_csv_has_seventeen_significant_digits() {
    let dir = TempDir::new().unwrap();
    assert!(run_config("profile", r#"{"p_values": [3]}"#, dir.path()).status.success());
    let text = fs::read_to_string(dir.path().join("profile_p3.csv")).unwrap();
    let row = text.lines().nth(1).unwrap();
    for field in row.split(',') {
        let mantissa = field.split('e').next().unwrap().trim_start_matches('-');
        assert_eq!(mantissa.chars().filter(char::is_ascii_digit).count(), 17, "{field}");
    }
}

#[test]
fn restart_from_emitted_row_reproduces_curve() {
    let dir = TempDir::new().unwrap();
    assert!(run_config("profile", "{}", dir.path()).status.success());
    for p in [2, 4, 8] {
        let first = dir.path().join(format!("profile_p{p}.csv"));
        let again = TempDir::new().unwrap();
        let cfg = format!(r#"{{"p_values": [{p}], "initial_csv": {:?}}}"#, first.to_str().unwrap());
        let out = run_config("profile", &cfg, again.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let (a, b) = (columns(&first), columns(&again.path().join(format!("profile_p{p}.csv"))));
        assert_eq!(a[0], b[0]);
        for c in 1..3 {
            for (x, y) in a[c].iter().zip(&b[c]) {
                assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "p = {p} column {c}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn identical_configs_give_identical_files() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for d in [&a, &b] {
        assert!(run_config("profile", r#"{"p_values": [2, 5]}"#, d.path()).status.success());
        assert!(run_config("secondvar", "{}", d.path()).status.success());
    }
    for f in ["profile_p2.csv", "profile_p5.csv", "profile.svg", "secondvar.csv", "secondvar_results.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn degenerate_exponent_is_refused() {
    let dir = TempDir::new().unwrap();
    let out = run_config("profile", r#"{"n": 3, "p_values": [2]}"#, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate: f'' ≡ 0"));
}

#[test]
fn infeasible_initial_slope_is_a_computation_error() {
    let dir = TempDir::new().unwrap();
    let out = run_config("profile", r#"{"fp0": 0.0}"#, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(&["nonsense"], None).status.code(), Some(1));
    assert_eq!(run_config("eval", "{not json", dir.path()).status.code(), Some(1));
    assert_eq!(run_config("eval", r#"{"unknown_key": 1}"#, dir.path()).status.code(), Some(1));
    let missing = dir.path().join("missing.json");
    let out = run(&["eval", "--config", missing.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(run(&["--help"], None).status.code(), Some(0));
}

#[test]
fn help_lists_defaults() {
    let out = run(&["varcheck", "--help"], None);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Default config") && text.contains("bumpy_torus"), "{text}");
}

#[test]
fn eval_sphere_gives_four_pi() {
    let dir = TempDir::new().unwrap();
    let out = run(&["eval", "--out-dir", dir.path().to_str().unwrap()], None);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("1.25663706143"));
    let rep = report(dir.path(), "eval");
    assert!((result(&rep, "value") - 4.0 * std::f64::consts::PI).abs() < 1e-8 * 4.0 * std::f64::consts::PI);
    assert!(result(&rep, "quadrature_error_estimate") < 1e-8);
}

#[test]
fn eval_with_wrong_expectation_fails_with_code_two() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"{"surface": {"kind": "torus", "big": 1.4142135623730951, "small": 1.0, "s": 2}, "grid": [64, 64], "expected": 19.0, "tolerance": 1e-6}"#;
    assert_eq!(run_config("eval", cfg, dir.path()).status.code(), Some(2));
    let cfg = r#"{"surface": {"kind": "torus", "big": 1.4142135623730951, "small": 1.0, "s": 2}, "grid": [64, 64], "expected": 19.739208802178716, "tolerance": 1e-6}"#;
    assert!(run_config("eval", cfg, dir.path()).status.success());
}

#[test]
fn default_varcheck_passes_every_case() {
    let dir = TempDir::new().unwrap();
    let out = run(&["varcheck", "--out-dir", dir.path().to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let rep = report(dir.path(), "varcheck");
    let names: Vec<&str> = rep["results"].as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    for id in ["g", "h", "nH", "sH_F", "lapF_f", "sigma_1", "Christoffel", "identity.ibp_full"] {
        assert!(names.contains(&id), "{id} missing from {names:?}");
    }
    assert!(dir.path().join("varcheck_table.csv").exists());
}

#[test]
fn confcheck_inversion_on_sheared_patch() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"{"surface": {"kind": "sheared_torus3", "eps": 1.0}, "r": 2, "map": {"kind": "inversion"}}"#;
    assert!(run_config("confcheck", cfg, dir.path()).status.success());
    assert!(result(&report(dir.path(), "confcheck"), "density_deviation") < 1e-6);
    let cfg = r#"{"map": {"kind": "scaling", "factor": 3.0}}"#;
    assert!(run_config("confcheck", cfg, dir.path()).status.success());
}

#[test]
fn confcheck_rejects_r_above_leaf_dimension() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run_config("confcheck", r#"{"r": 3}"#, dir.path()).status.code(), Some(2));
}

#[test]
fn elcheck_default_and_off_critical() {
    let dir = TempDir::new().unwrap();
    assert!(run(&["elcheck", "--out-dir", dir.path().to_str().unwrap()], None).status.success());
    let cfg = r#"{"surface": {"kind": "revolution", "n": 2, "profile": {"shape": "catenoid", "a": 0.3}, "rho_min": 0.4, "rho_max": 0.9}, "grid": [16, 10]}"#;
    assert_eq!(run_config("elcheck", cfg, dir.path()).status.code(), Some(2));
    assert!(result(&report(dir.path(), "elcheck"), "max_el_residual") > 1e-3);
}

#[test]
fn secondvar_signs_and_cross_check() {
    let dir = TempDir::new().unwrap();
    let out = run(&["secondvar", "--out-dir", dir.path().to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = report(dir.path(), "secondvar");
    assert!(result(&rep, "delta2_j0_negative") < 0.0);
    assert!(result(&rep, "delta2_j1_positive") > 0.0);
    assert!(result(&rep, "cross_check_j1") < 1e-6);
}

#[test]
fn secondvar_window_past_the_vertical_tangent_is_refused() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run_config("secondvar", r#"{"window": [0.2, 0.9]}"#, dir.path()).status.code(), Some(2));
}
