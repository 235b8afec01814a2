//! End-to-end tests of the `qbrach` binary: exit codes, file formats,
//! determinism, and the documented output invariants.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qbrach"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .env_remove("QBRACH_SEED_STORE")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().expect("stdout line");
    serde_json::from_str(line).expect("stdout is a JSON line")
}

#[test]
fn solve_two_level_chain() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["solve", "--n", "2", "--j0", "1", "--out", "sol.json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = stdout_json(&out);
    let tau = line["tau"].as_f64().unwrap();
    assert!((tau - std::f64::consts::FRAC_PI_2).abs() < 1e-6, "tau = {tau}");
    assert!(dir.path().join("sol.json").exists());
}

#[test]
fn solve_three_site_chain_matches_reference() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["solve", "--n", "3"], dir.path());
    assert!(out.status.success());
    let line = stdout_json(&out);
    assert!((line["tau"].as_f64().unwrap() - 2.7207).abs() < 1e-3);
    assert!(line["fidelity"].as_f64().unwrap() >= 1.0 - 1e-8);
    // Default output path.
    assert!(dir.path().join("solution-n3.json").exists());
}

#[test]
fn tau_scales_inversely_with_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = run(&["solve", "--n", "3", "--j0", "1"], dir.path());
    let out2 = run(&["solve", "--n", "3", "--j0", "2", "--out", "s2.json"], dir.path());
    let tau1 = stdout_json(&out1)["tau"].as_f64().unwrap();
    let tau2 = stdout_json(&out2)["tau"].as_f64().unwrap();
    assert!((2.0 * tau2 / tau1 - 1.0).abs() < 1e-9, "{tau1} vs {tau2}");
}

#[test]
fn solution_file_round_trips_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    run(&["solve", "--n", "4", "--out", "a.json"], dir.path());
    run(&["solve", "--n", "4", "--out", "b.json"], dir.path());
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    let b = std::fs::read(dir.path().join("b.json")).unwrap();
    assert_eq!(a, b, "repeated solves must serialize identically");
}

#[test]
fn seed_store_accumulates_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("seeds.json");
    let store_arg = store.to_str().unwrap();
    let out = run(
        &["solve", "--n", "5", "--seed-store", store_arg, "--out", "s5.json"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(store.exists());

    // Second run loads and re-solves from the stored guess.
    let out = run(
        &["solve", "--n", "5", "--seed-store", store_arg, "--out", "s5b.json"],
        dir.path(),
    );
    assert!(out.status.success());

    // Tampering with a stored value must be caught by the checksum.
    let text = std::fs::read_to_string(&store).unwrap();
    let tampered = text.replacen("\"iterations\":", "\"iterations\":1", 1);
    assert_ne!(text, tampered);
    std::fs::write(&store, tampered).unwrap();
    let out = run(&["export", "--seed-store", store_arg], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn stepwise_schedule_simulates_to_full_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["baseline", "--n", "10", "--protocol", "stepwise", "--out", "sched.json"],
        dir.path(),
    );
    assert!(out.status.success());
    let line = stdout_json(&out);
    assert!((line["tau"].as_f64().unwrap() - 9.0 * std::f64::consts::PI / 2.0).abs() < 1e-9);
    assert!(line["terminal_fidelity"].as_f64().unwrap() >= 1.0 - 1e-10);

    let out = run(
        &["simulate", "--input", "sched.json", "--samples", "101", "--out", "traj.csv"],
        dir.path(),
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("traj.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header[0], "t");
    assert_eq!(*header.last().unwrap(), "x_mean");
    let first: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    // t = 0: all probability on site 1.
    let p1_col = header.iter().position(|h| *h == "p_1").unwrap();
    assert!((first[p1_col] - 1.0).abs() < 1e-12);
    let last: Vec<f64> = lines.last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((last[header.len() - 1] - 10.0).abs() < 1e-6, "terminal <x> = {}", last[header.len() - 1]);
}

#[test]
fn solved_trajectory_moves_monotonically() {
    let dir = tempfile::tempdir().unwrap();
    run(&["solve", "--n", "6", "--out", "s6.json"], dir.path());
    let out = run(
        &["simulate", "--input", "s6.json", "--samples", "201", "--out", "t6.csv"],
        dir.path(),
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("t6.csv")).unwrap();
    let x: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!((x[0] - 1.0).abs() < 1e-9);
    assert!((x[x.len() - 1] - 6.0).abs() < 1e-4);
    for w in x.windows(2) {
        assert!(w[1] >= w[0] - 1e-3, "position not monotone: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn sweep_is_deterministic_and_fits() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["sweep", "--n-min", "3", "--n-max", "6", "--out", "sweep.csv"];
    let out1 = run(&args, dir.path());
    assert!(out1.status.success(), "{}", String::from_utf8_lossy(&out1.stderr));
    let csv1 = std::fs::read(dir.path().join("sweep.csv")).unwrap();
    let out2 = run(&["sweep", "--n-min", "3", "--n-max", "6", "--out", "sweep2.csv"], dir.path());
    assert!(out2.status.success());
    let csv2 = std::fs::read(dir.path().join("sweep2.csv")).unwrap();
    assert_eq!(csv1, csv2, "sweep output must be deterministic");

    let summary = stdout_json(&out1);
    assert_eq!(summary["converged"].as_u64().unwrap(), 4);
    let slope = summary["fit"]["slope"].as_f64().unwrap();
    assert!((1.10..1.16).contains(&slope), "slope {slope}");

    let out = run(&["fit", "--input", "sweep.csv"], dir.path());
    assert!(out.status.success());
    let fit = stdout_json(&out);
    assert!((fit["slope"].as_f64().unwrap() - slope).abs() < 1e-12);
}

#[test]
fn verify_emits_reports_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["verify", "--n-conservation", "8", "--out-dir", "reports"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in [
        "oracle_equivalence.json",
        "conservation.json",
        "baseline_fidelity.json",
    ] {
        let path = dir.path().join("reports").join(name);
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(report["pass"], serde_json::Value::Bool(true), "{name}");
    }
}

#[test]
fn long_chain_solve_from_reference_store() {
    // Continuation from the committed store carries the solve well past
    // the stored lengths.
    let store = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../seeds/reference-seeds.json");
    let dir = tempfile::tempdir().unwrap();
    let local = dir.path().join("seeds.json");
    std::fs::copy(&store, &local).unwrap();
    let out = run(
        &["solve", "--n", "20", "--seed-store", local.to_str().unwrap(), "--out", "s20.json"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = stdout_json(&out);
    assert!((line["tau"].as_f64().unwrap() - 21.9402).abs() < 1e-2);
    assert_eq!(line["method"].as_str().unwrap(), "gradient");
}

#[test]
fn export_tabulates_reference_store() {
    // The committed store ships solver-produced entries for N = 3..10.
    let store = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../seeds/reference-seeds.json");
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["export", "--seed-store", store.to_str().unwrap(), "--out", "table.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let lam_col = header.iter().position(|h| *h == "lambda_1_3").unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 8);
    let lam13: f64 = rows[0][lam_col].parse().unwrap();
    assert!((lam13 + 0.816497).abs() < 1e-4, "lambda13 = {lam13}");
}

#[test]
fn invalid_inputs_exit_with_schema_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["solve", "--n", "1"], dir.path());
    assert_eq!(out.status.code(), Some(4));

    std::fs::write(dir.path().join("bad.json"), "{\"kind\": \"mystery\"}").unwrap();
    let out = run(&["simulate", "--input", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind"));
}

#[test]
fn sweep_records_failed_rows_and_exits_with_convergence_code() {
    // Forcing the shooting path past its length limit makes the last row
    // fail; the sweep must still write every row and then exit 2.
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["sweep", "--n-min", "15", "--n-max", "17", "--method", "shooting", "--out", "s.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].contains(",true,"));
    assert!(rows[1].contains(",true,"));
    assert!(rows[2].contains(",false,"));
}
