use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use reachkit::bangbang::{integrate_linear, BangBangControl, ChannelSchedule};
use reachkit::fixtures::{self, double_integrator};
use reachkit::sysdef::parse_system;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reachkit")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn systems_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../systems")
}

fn system(name: &str) -> String {
    systems_dir().join(format!("{name}.json")).to_string_lossy().into_owned()
}

/// Data rows of a CSV artifact, header comment and column names dropped.
fn rows(text: &str) -> Vec<Vec<String>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    lines.next();
    lines.map(|l| l.split(',').map(str::to_owned).collect()).collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("reachkit-cli-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn bundled_files_match_builtins() {
    for name in fixtures::NAMES {
        let text = fs::read_to_string(system(name)).unwrap();
        assert_eq!(parse_system(&text).unwrap(), fixtures::named(name).unwrap(), "{name}");
    }
}

#[test]
fn check_reports_normality() {
    let out = run(&["check", "--system", &system("double_integrator")]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("normal: yes, L=1"), "{}", stdout(&out));
}

#[test]
fn check_flags_of_nonlinear_fixtures() {
    let out = run(&["check", "--system", &system("degenerate_linearization")]);
    assert_eq!(code(&out), 2);
    assert!(stdout(&out).contains("linearization not normal"));

    let out = run(&["check", "--system", &system("flat_failure"), "--json"]);
    assert_eq!(code(&out), 2);
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["flags"]["drift_vanishes"], true);
    assert_eq!(v["flags"]["linearization_normal"], true);
    assert_eq!(v["flags"]["control_flat"], false);
}

#[test]
fn parse_failures_exit_with_two() {
    let bad = scratch("bad.json");
    fs::write(&bad, r#"{"kind": "linear", "A": [[0, 1]], "B": [[1]]}"#).unwrap();
    let high = scratch("high.json");
    fs::write(&high, r#"{"kind": "nonlinear2d", "F": [[{"e": [7, 0], "c": 1}], []], "G": [[[], [{"e": [0, 0], "c": 1}]]]}"#)
        .unwrap();
    for path in [bad.to_str().unwrap(), high.to_str().unwrap(), "/nonexistent/system.json", "builtin:nothing"] {
        let out = run(&["check", "--system", path]);
        assert_eq!(code(&out), 2, "{path}: {}", stderr(&out));
    }
    assert_eq!(code(&run(&["check"])), 2);
    assert_eq!(code(&run(&["check", "--dirs", "many"])), 2);
}

#[test]
fn double_integrator_boundary_is_symmetric() {
    let out = run(&["boundary", "--system", &system("double_integrator"), "--tau", "1", "--dirs", "360"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let pts: Vec<(f64, f64)> = rows(&stdout(&out)).iter().map(|r| (num(&r[2]), num(&r[3]))).collect();
    assert_eq!(pts.len(), 360);
    for (x, y) in &pts {
        let mirrored = pts.iter().any(|(a, b)| (a + x).abs() < 1e-9 && (b + y).abs() < 1e-9);
        assert!(mirrored, "({x}, {y})");
    }
}

#[test]
fn flat_failure_boundary_passes_through_the_midpoint() {
    let out = run(&["boundary", "--system", &system("flat_failure"), "--tau", "1"]);
    assert_eq!(code(&out), 2);

    let out = run(&["boundary", "--system", &system("flat_failure"), "--tau", "1", "--exploratory"]);
    assert_eq!(code(&out), 0);
    let pts: Vec<(f64, f64)> = rows(&stdout(&out)).iter().map(|r| (num(&r[1]), num(&r[2]))).collect();
    let target = (0.25, 0.0);
    let dist = (0..pts.len())
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
            let d = (b.0 - a.0, b.1 - a.1);
            let len = d.0 * d.0 + d.1 * d.1;
            let t = if len > 0.0 { (((target.0 - a.0) * d.0 + (target.1 - a.1) * d.1) / len).clamp(0.0, 1.0) } else { 0.0 };
            (target.0 - a.0 - t * d.0).hypot(target.1 - a.1 - t * d.1)
        })
        .fold(f64::INFINITY, f64::min);
    assert!(dist < 1e-3, "{dist}");
}

#[test]
fn cubic_boundary_is_closed() {
    let out = run(&["boundary", "--system", &system("cubic_double_integrator"), "--tau", "0.2", "--json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: Value = serde_json::from_str(stderr(&out).trim()).unwrap();
    assert_eq!(summary["closed"], true);
    assert_eq!(summary["simple"], true);
    assert_eq!(summary["mode"], "certified");
}

#[test]
fn mintime_origin_and_symmetric_pairs() {
    let tol = 1e-6;
    let out = run(&[
        "mintime",
        "--system",
        &system("double_integrator"),
        "--point",
        "0,0",
        "--point",
        "0.3,-0.2",
        "--point",
        "-0.3,0.2",
        "--point",
        "-0.1,-0.45",
        "--point",
        "0.1,0.45",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let t: Vec<f64> = rows(&stdout(&out)).iter().map(|r| num(&r[2])).collect();
    assert_eq!(t[0], 0.0);
    assert!((t[1] - t[2]).abs() <= 2.0 * tol);
    assert!((t[3] - t[4]).abs() <= 2.0 * tol);
}

#[test]
fn mintime_recovers_construction_time() {
    // Run the reversed flow from the origin; the forward flow under the
    // time-reversed control returns to 0 in the same time, and a single
    // switch is optimal for the double integrator.
    let sys = double_integrator();
    let file = scratch("points.txt");
    let mut text = String::from("# x1 x2\n");
    let mut times = Vec::new();
    for (t, s, sign) in [(0.8, 0.3, 1), (1.2, 0.9, -1), (0.5, 0.25, 1)] {
        let u = BangBangControl::new(t, vec![ChannelSchedule { initial_sign: sign, switch_times: vec![s] }]).unwrap();
        let x = integrate_linear(&sys.reversed(), &u);
        text.push_str(&format!("{:e}, {:e}\n", x[0], x[1]));
        times.push(t);
    }
    fs::write(&file, text).unwrap();
    let out = run(&["mintime", "--system", "builtin:double_integrator", "--points", file.to_str().unwrap(), "--tol", "1e-8"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for (row, t) in rows(&stdout(&out)).iter().zip(times) {
        assert!((num(&row[2]) - t).abs() < 1e-6, "{row:?} vs {t}");
    }
}

#[test]
fn mintime_gap_bound_sets_exit_code() {
    let args = ["mintime", "--system", "builtin:double_integrator", "--point", "0.2,0.1", "--resolution", "64"];
    let out = run(&[&args[..], &["--gap-bound", "1e-6"]].concat());
    assert_eq!(code(&out), 4);
    let out = run(&[&args[..], &["--gap-bound", "1"]].concat());
    assert_eq!(code(&out), 0);
    assert_eq!(rows(&stdout(&out))[0][3], "both");
}

#[test]
fn oracle_table_and_gap_exit_code() {
    let base = [
        "oracle", "--system", "builtin:double_integrator", "--seed", "7", "--count", "20", "--resolution", "64", "--half-width",
        "0.2",
    ];
    let out = run(&[&base[..], &["--gap-bound", "1e-6"]].concat());
    assert_eq!(code(&out), 4);
    assert_eq!(rows(&stdout(&out)).len(), 20);
    let out = run(&[&base[..], &["--gap-bound", "10"]].concat());
    assert_eq!(code(&out), 0);
    assert_eq!(code(&run(&["oracle", "--system", "builtin:triple_integrator"])), 2);
}

fn certificates(out: &Output) -> Value {
    let v: Value = serde_json::from_str(&stdout(out)).unwrap();
    let mut by_name = serde_json::Map::new();
    for c in v["certificates"].as_array().unwrap() {
        by_name.insert(c["name"].as_str().unwrap().to_owned(), c.clone());
    }
    Value::Object(by_name)
}

#[test]
fn certify_linear_fixtures() {
    let out = run(&["certify", "--system", &system("double_integrator"), "--tau", "1", "--dirs", "120"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let c = certificates(&out);
    assert_eq!(c["convexity"]["pass"], true);
    assert_eq!(c["convexity"]["exponent"], 2.0);

    let out = run(&["certify", "--system", &system("triple_integrator"), "--tau", "1", "--dirs", "120"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let c = certificates(&out);
    let exponent = c["contact_exponent"]["exponent"].as_f64().unwrap();
    assert!((exponent - 3.0).abs() < 0.1, "{exponent}");
}

#[test]
fn certify_flat_failure_is_nonconvex_with_positive_reach() {
    let out = run(&["certify", "--system", &system("flat_failure"), "--tau", "1", "--dirs", "120", "--exploratory"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let c = certificates(&out);
    assert_eq!(c["convexity"]["pass"], false);
    assert_eq!(c["positive_reach"]["pass"], true);
}

#[test]
fn certify_refuses_degenerate_linearization() {
    let out = run(&["certify", "--system", &system("degenerate_linearization")]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("not normal"));
}

#[test]
fn certify_failure_in_certified_mode_exits_with_five() {
    // eligible at the origin, but the strong quadratic drift folds the set
    // at a long horizon
    let file = scratch("folded.json");
    fs::write(
        &file,
        r#"{"kind": "nonlinear2d", "F": [[{"e": [0, 1], "c": 1}, {"e": [0, 2], "c": 2}], []], "G": [[[], [{"e": [0, 0], "c": 1}]]]}"#,
    )
    .unwrap();
    let out = run(&["certify", "--system", file.to_str().unwrap(), "--tau", "1", "--dirs", "90"]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["pass"], false);
    assert_eq!(v["mode"], "certified");
}

#[test]
fn examples_all_pass() {
    let out = run(&["examples"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    assert_eq!(text.matches(" PASS:").count(), 5, "{text}");
    assert!(text.contains("chain_gap_n2") && text.contains("flat_failure_tau1") && text.contains("degenerate_linearization"));
}

#[test]
fn outputs_are_deterministic_and_carry_headers() {
    let args = ["boundary", "--system", "builtin:rotation", "--dirs", "64"];
    let a = run(&args);
    let b = run(&args);
    assert_eq!(a.stdout, b.stdout);
    let first = stdout(&a).lines().next().unwrap().to_owned();
    assert!(first.starts_with(&format!("# reachkit {} boundary config=", env!("CARGO_PKG_VERSION"))), "{first}");
    assert!(first.ends_with("seed=0"));

    let path = scratch("oracle.csv");
    let base = ["oracle", "--system", "builtin:double_integrator", "--count", "5", "--resolution", "64", "--gap-bound", "10"];
    let one = run(&[&base[..], &["--seed", "3", "--out", path.to_str().unwrap()]].concat());
    assert_eq!(code(&one), 0);
    assert!(one.stdout.is_empty());
    let saved = fs::read_to_string(&path).unwrap();
    assert!(saved.lines().next().unwrap().ends_with("seed=3"));
    let other = run(&[&base[..], &["--seed", "4"]].concat());
    assert_ne!(saved.lines().nth(2), stdout(&other).lines().nth(2));

    let out = run(&["certify", "--system", "builtin:rotation", "--dirs", "64"]);
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["header"]["seed"], 0);
    assert_eq!(v["header"]["config_hash"].as_str().unwrap().len(), 64);
}
