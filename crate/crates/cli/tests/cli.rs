//! End-to-end tests of the `gcir` binary: artifact formats, metadata
//! sidecars, determinism, and exit-code conventions.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gcir(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcir"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary starts")
}

fn run_ok(dir: &Path, args: &[&str]) -> serde_json::Value {
    let out = gcir(dir, args);
    assert!(
        out.status.success(),
        "command {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON line")
}

fn read_meta(path: &Path) -> serde_json::Value {
    let meta_path = format!("{}.meta.json", path.display());
    serde_json::from_str(&fs::read_to_string(meta_path).expect("sidecar exists"))
        .expect("sidecar is JSON")
}

#[test]
fn density_emits_csv_grid_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_ok(dir.path(), &["density", "--out", "d.csv"]);
    assert_eq!(summary["command"], "density");
    let text = fs::read_to_string(dir.path().join("d.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("y,g"));
    let n_rows = lines.count();
    assert!(n_rows > 1000, "{n_rows} rows");
    assert_eq!(summary["rows"], n_rows);
    let meta = read_meta(&dir.path().join("d.csv"));
    assert_eq!(meta["artifact_version"], 1);
    assert_eq!(meta["command"], "density");
    assert_eq!(meta["config"]["kappa_y"], "100.0");
}

#[test]
fn moments_json_reports_mixture_mean_dispersion() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(dir.path(), &["moments", "--out", "m.json"]);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    // sigma2 = k theta1 + (1 - k) theta2 = 0.025/3 + 0.2/3 = 0.075.
    let sigma2 = m["sigma2"].as_f64().unwrap();
    assert!((sigma2 - 0.075).abs() < 1e-6, "sigma2 {sigma2}");
    for key in ["D", "S", "K2", "K3", "K4"] {
        assert!(m[key].is_number(), "missing field {key}");
    }
}

#[test]
fn price_at_zero_epsilon_collapses_to_order_zero() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(dir.path(), &["price", "--eps", "0", "--out", "e0.json"]);
    run_ok(dir.path(), &["price", "--order", "0", "--out", "o0.json"]);
    let a: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("e0.json")).unwrap()).unwrap();
    let b: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o0.json")).unwrap()).unwrap();
    assert_eq!(a["price"], b["price"]);
    assert_eq!(a["price"], a["p0"]);
}

#[test]
fn term_structure_reruns_bit_identically_from_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        dir.path(),
        &["term-structure", "--n-tau", "25", "--out", "a.csv"],
    );
    let first = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert!(first.starts_with("tau,R_order0,R_order1,R_order2\n"));
    assert_eq!(first.lines().count(), 26);

    run_ok(
        dir.path(),
        &["term-structure", "--config", "a.csv.meta.json", "--out", "b.csv"],
    );
    let second = fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert_eq!(first, second, "sidecar rerun must be bit-identical");
}

#[test]
fn term_structure_yield_starts_at_short_rate() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        dir.path(),
        &[
            "term-structure",
            "--tau-max",
            "0.01",
            "--n-tau",
            "1",
            "--out",
            "t.csv",
        ],
    );
    let text = fs::read_to_string(dir.path().join("t.csv")).unwrap();
    let row = text.lines().nth(1).unwrap();
    let fields: Vec<f64> = row.split(',').map(|s| s.parse().unwrap()).collect();
    for &yield_value in &fields[1..] {
        assert!((yield_value - 0.03).abs() < 1e-3, "R(0.01) = {yield_value}");
    }
}

#[test]
fn simulate_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "simulate", "--paths", "100", "--horizon", "0.2", "--seed", "11", "--out", "s1.json",
    ];
    let summary = run_ok(dir.path(), &args);
    let price = summary["price"].as_f64().unwrap();
    assert!((0.9..1.0).contains(&price), "price {price}");
    assert!(summary["std_error"].as_f64().unwrap() > 0.0);
    // The stationary-law comparison is only reported under the physical
    // measure; the pricing-measure default must leave it unset.
    assert!(summary["ks_terminal_y"].is_null());

    let mut rerun = args;
    rerun[8] = "s2.json";
    run_ok(dir.path(), &rerun);
    let a = fs::read_to_string(dir.path().join("s1.json")).unwrap();
    let b = fs::read_to_string(dir.path().join("s2.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn simulate_antithetic_halves_independent_units() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_ok(
        dir.path(),
        &[
            "simulate", "--paths", "100", "--horizon", "0.1", "--antithetic", "--out", "sa.json",
        ],
    );
    assert_eq!(summary["n_units"], 50);
    assert_eq!(summary["antithetic"], true);
}

#[test]
fn simulate_physical_measure_reports_stationary_fit() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_ok(
        dir.path(),
        &[
            "simulate",
            "--paths",
            "150",
            "--horizon",
            "0.2",
            "--measure",
            "physical",
            "--seed",
            "3",
            "--out",
            "sp.json",
        ],
    );
    // No discounting under the physical measure, but the terminal
    // dispersion ensemble should sit close to the stationary law.
    assert!(summary["price"].is_null());
    let ks = summary["ks_terminal_y"].as_f64().unwrap();
    assert!(ks > 0.0 && ks < 0.2, "ks {ks}");
}

#[test]
fn simulate_dump_caps_paths_at_one_thousand() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        dir.path(),
        &[
            "simulate",
            "--paths",
            "1200",
            "--horizon",
            "0.005",
            "--dump-paths",
            "paths.csv",
            "--out",
            "sd.json",
        ],
    );
    let text = fs::read_to_string(dir.path().join("paths.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("path,time,r,y"));
    // 10 stored steps + initial state = 11 rows per path, 1000-path cap.
    assert_eq!(lines.count(), 1000 * 11);
    assert!(dir.path().join("paths.csv.meta.json").exists());
}

#[test]
fn calibrate_synthetic_emits_estimates_and_kde() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_ok(
        dir.path(),
        &["calibrate", "--synthetic", "--days", "800", "--seed", "3"],
    );
    assert_eq!(summary["windows"], 40);
    assert!(summary["bandwidth"].as_f64().unwrap() > 0.0);
    let est = fs::read_to_string(dir.path().join("estimates.csv")).unwrap();
    assert!(est.starts_with("window_start,sigma2_hat\n"));
    assert_eq!(est.lines().count(), 41);
    let kde = fs::read_to_string(dir.path().join("kde.csv")).unwrap();
    assert!(kde.starts_with("x,density\n"));
    assert_eq!(kde.lines().count(), 1025);
}

#[test]
fn calibrate_requires_an_input_choice() {
    let dir = tempfile::tempdir().unwrap();
    let out = gcir(dir.path(), &["calibrate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--input") && err.contains("--synthetic"), "{err}");
}

#[test]
fn residual_table_has_square_root_slope() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_ok(
        dir.path(),
        &[
            "residual", "--eps", "1e-3", "--eps", "4e-3", "--eps", "1.6e-2", "--samples", "40",
            "--out", "r.csv",
        ],
    );
    let slope = summary["slope"].as_f64().unwrap();
    assert!((slope - 0.5).abs() < 0.1, "slope {slope}");
    let text = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(text.starts_with("eps,sup,rms\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn computation_errors_exit_one_with_structured_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = gcir(dir.path(), &["price", "--kappa", "-4", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value =
        serde_json::from_slice(&out.stderr).expect("stderr is structured JSON");
    assert!(err["error"].as_str().unwrap().contains("kappa"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gcir(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        gcir(dir.path(), &["price", "--format", "yaml"]).status.code(),
        Some(2)
    );
}

#[test]
fn flags_override_config_file_values() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.cfg"),
        "r0 = 0.05\ntheta = 0.04 # file value kept\n",
    )
    .unwrap();
    run_ok(
        dir.path(),
        &[
            "price", "--config", "run.cfg", "--r0", "0.03", "--out", "p.json",
        ],
    );
    let meta = read_meta(&dir.path().join("p.json"));
    assert_eq!(meta["config"]["r0"], "0.03");
    assert_eq!(meta["config"]["theta"], "0.04");
}
