use std::path::Path;
use std::process::{Command, Output};

use ivqr_core::cli::{FitReport, TableReport};
use ivqr_core::dataset::{load_csv, RoleMap};
use ivqr_core::montecarlo::SimulationReport;
use ivqr_core::stats::RngStream;

fn ivqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivqr"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

// y = 2 d + 0.5 x exactly.
fn toy(dir: &Path) -> (String, String) {
    let mut rng = RngStream::new(5, 0);
    let mut body = String::from("y,d,x,z1,z2\n");
    for _ in 0..60 {
        let (x, a, b) = (rng.uniform(), rng.uniform(), rng.uniform());
        let d = 1.0 + a + 0.5 * b + rng.standard_normal();
        body.push_str(&format!("{},{d},{x},{a},{b}\n", 2.0 * d + 0.5 * x));
    }
    let data = dir.join("toy.csv");
    let map = dir.join("toy.map");
    std::fs::write(&data, body).unwrap();
    std::fs::write(&map, "outcome = y\nendogenous = d\nexogenous = x\ninstruments = z1, z2\n").unwrap();
    (data.to_str().unwrap().to_string(), map.to_str().unwrap().to_string())
}

#[test]
fn fit_echoes_alpha_in_json() {
    let dir = tempfile::tempdir().unwrap();
    let (data, map) = toy(dir.path());
    let o = ivqr(&[
        "fit", "--data", &data, "--map", &map, "--tau", "0.5", "--grid", "0:0.05:4", "--A", "identity", "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let reports: Vec<FitReport> = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(reports.len(), 1);
    assert!((reports[0].alpha_hat - 2.0).abs() < 1e-9);
    assert_eq!(reports[0].objective_curve.len(), 81);
}

#[test]
fn fit_csv_reloads_at_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let (data, map) = toy(dir.path());
    let csv = dir.path().join("fit.csv");
    let json = dir.path().join("fit.json");
    let base = ["fit", "--data", &data, "--map", &map, "--grid", "-1:0.1:4", "--A", "identity"];
    let o = ivqr(&[&base[..], &["--out", csv.to_str().unwrap()]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("tau = 0.25"));
    let o = ivqr(&[&base[..], &["--out", json.to_str().unwrap(), "--format", "json"]].concat());
    assert!(o.status.success());
    let reports: Vec<FitReport> = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    // outcome = value, regressed on alpha, with the quantile level as instrument
    let roles = RoleMap::new("value", &["alpha"], &[], &["tau"]);
    let reloaded = load_csv(&csv, &roles, false).unwrap();
    let per_tau = 1 + 2 + 2 + 51;
    assert_eq!(reloaded.n(), 3 * per_tau);
    for (t, r) in reports.iter().enumerate() {
        let off = t * per_tau;
        assert_eq!(reloaded.y()[off], r.alpha_hat);
        for (i, p) in r.objective_curve.iter().enumerate() {
            assert_eq!(reloaded.y()[off + 5 + i], p.objective);
            assert_eq!(reloaded.d()[(off + 5 + i, 0)], p.alpha);
        }
    }
}

#[test]
fn missing_flag_is_a_usage_error() {
    let o = ivqr(&["fit", "--map", "x.map"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--data"));
    let o = ivqr(&["simulate", "--tau", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ivqr(&["simulate", "--n", "10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at least 50"));
}

#[test]
fn missing_file_is_an_io_error() {
    let o = ivqr(&["fit", "--data", "/nonexistent/x.csv", "--map", "/nonexistent/x.map"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn joint_test_of_all_instruments_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (data, map) = toy(dir.path());
    let o = ivqr(&[
        "first-stage", "--data", &data, "--map", &map, "--tau", "0.5", "--grid", "0:0.1:4", "--A", "identity",
        "--test", "z1,z2",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).to_lowercase().contains("identif"), "{}", stderr(&o));
    let o = ivqr(&["first-stage", "--data", &data, "--map", &map, "--test", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_is_reproducible_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, threads: &str, format: &str| {
        let path = dir.path().join(name);
        let o = ivqr(&[
            "simulate", "--n", "100", "--reps", "8", "--seed", "7", "--grid", "-1:0.05:3", "--threads", threads,
            "--out", path.to_str().unwrap(), "--format", format,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(path).unwrap()
    };
    let a = run("a.csv", "1", "csv");
    let b = run("b.csv", "2", "csv");
    assert_eq!(a, b);
    let j = run("a.json", "2", "json");
    let report: SimulationReport = serde_json::from_str(&j).unwrap();
    // 3 taus x 3 nominal levels x 3 methods
    assert_eq!(report.cells.len(), 27);
    let roles = RoleMap::new("rate", &["tau"], &[], &["nominal"]);
    let path = dir.path().join("a.csv");
    let table = load_csv(&path, &roles, false).unwrap();
    for (i, c) in report.cells.iter().enumerate() {
        assert_eq!(table.y()[i], c.rate);
        assert_eq!(table.d()[(i, 0)], c.tau);
    }
}

#[test]
fn scale_sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("power.csv");
    let o = ivqr(&[
        "power", "--sweep", "scale", "--phi", "1", "--values", "0,0.5,1", "--n", "80", "--reps", "4", "--grid",
        "-1:0.1:3", "--out", path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(path).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    for (row, b) in rows[1..].iter().zip(["0", "0.5", "1"]) {
        assert!(row.starts_with(&format!("scale,{b},")));
    }
}

#[test]
fn unreachable_archive_is_a_network_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ivqr(&[
        "replicate-card", "--fetch", "--cache-dir", dir.path().to_str().unwrap(), "--url",
        "http://127.0.0.1:9/proximity.zip",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn card_table_two_stage_column() {
    let o = ivqr(&["replicate-card", "--tau", "0.5", "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: TableReport = serde_json::from_str(&stdout(&o)).unwrap();
    let tsls = report.column("FS-2SLS", None).unwrap();
    let near2 = tsls.coefficient("nearc2").unwrap();
    assert!((near2.estimate - 0.123).abs() < 0.005);
    assert_eq!(near2.stars, "");
    let ivqr = report.column("FS-IVQR", Some(0.5)).unwrap();
    let educ = ivqr.second_stage.as_ref().unwrap();
    assert!((educ.estimate - 0.268).abs() < 1e-9);
}
