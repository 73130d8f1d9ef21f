use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gridmarkov::case_io::{from_canonical_json, ieee14};

const TWO_BUS: &str = "function mpc = two
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	135	1	1.05	0.95;
	2	1	0	0	0	0	1	1	0	135	1	1.05	0.95;
];
mpc.branch = [
	1	2	0.01	0.1	0	0	0	0	0	0	1	-360	360;
];
";

fn gridmarkov(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridmarkov"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn small_manifest(dir: &Path, extra: &str) -> String {
    let text = format!(
        "seed = 11\n{extra}\n[tuning]\ncalibration_windows = 10\n[sweep]\nreps = 4\ncorrupted = [0, 130]\nkmax = 3\n[anomaly]\nreps = 3\n"
    );
    fs::write(dir.join("m.toml"), text).unwrap();
    "m.toml".into()
}

#[test]
fn parse_prints_canonical_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridmarkov(dir.path(), &["parse", "ieee14"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let case = from_canonical_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(case, ieee14());
}

#[test]
fn parse_errors_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("broken.m"), "mpc.bus = [\n1 3 0;\n").unwrap();
    assert_eq!(code(&gridmarkov(dir.path(), &["parse", "broken.m"])), 2);
    assert_eq!(code(&gridmarkov(dir.path(), &["parse", "missing.m"])), 2);
    assert_eq!(code(&gridmarkov(dir.path(), &["frobnicate"])), 2);
}

#[test]
fn predict_graph_lists_topology_edges() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridmarkov(dir.path(), &["predict-graph", "ieee14"]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // 20 branches, of which two touch the slack bus.
    assert_eq!(v["edges"].as_array().unwrap().len(), 18);
    assert_eq!(v["var_ids"].as_array().unwrap().len(), 13);
}

#[test]
fn empty_xi_grid_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.toml"), "[tuning]\nxi_grid = []\n").unwrap();
    let out = gridmarkov(dir.path(), &["--manifest", "m.toml", "tune"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("xi_grid"));
}

#[test]
fn unknown_manifest_field_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.toml"), "sigma = 1\n").unwrap();
    assert_eq!(code(&gridmarkov(dir.path(), &["--manifest", "m.toml", "tune"])), 2);
}

#[test]
fn unreachable_tuning_bound_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.toml"), "[tuning]\nxi_grid = [5.0]\nbound = 0\ncalibration_windows = 2\n").unwrap();
    let out = gridmarkov(dir.path(), &["--manifest", "m.toml", "tune"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn two_bus_case_tunes_trivially() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("two.m"), TWO_BUS).unwrap();
    fs::write(
        dir.path().join("m.toml"),
        "case = \"two.m\"\n[window]\nsize = 50\n[tuning]\ncalibration_windows = 5\n[sweep]\ncorrupted = [0]\n",
    )
    .unwrap();
    let out = gridmarkov(dir.path(), &["--manifest", "m.toml", "--out", "o", "tune"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let tuned: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/tuned.json")).unwrap()).unwrap();
    assert_eq!(tuned["tuned_edit_distance"], 0);
}

#[test]
fn tune_reports_walk_summable_model() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_manifest(dir.path(), "");
    let out = gridmarkov(dir.path(), &["--manifest", &m, "--out", "o", "tune"]);
    assert_eq!(code(&out), 0);
    let tuned: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/tuned.json")).unwrap()).unwrap();
    assert!(tuned["alpha"].as_f64().unwrap() < 1.0);
    assert!(tuned["xi"].as_f64().unwrap() > 0.0);
}

#[test]
fn simulate_then_detect_flags_a_long_attack() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_manifest(dir.path(), "");
    let base = ["--manifest", m.as_str(), "--out", "o"];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = base.iter().chain(extra).copied().collect();
        gridmarkov(dir.path(), &args)
    };
    assert_eq!(code(&run(&["simulate", "--samples", "500", "--attacked", "4,5,6", "--duration", "300"])), 0);
    let samples = fs::read_to_string(dir.path().join("o/samples.csv")).unwrap();
    assert!(samples.starts_with("# manifest_sha256="));
    let out = run(&["detect", "o/samples.csv"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ALARM"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/detection.json")).unwrap()).unwrap();
    assert_eq!(report["alarm"], true);
    assert_eq!(code(&run(&["detect", "o/none.csv"])), 2);
}

#[test]
fn attack_on_the_slack_bus_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridmarkov(dir.path(), &["--out", "o", "simulate", "--attacked", "1,2"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn sweep_writes_headed_tables_and_resumes_from_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_manifest(dir.path(), "");
    let args = ["--manifest", m.as_str(), "--out", "o", "sweep"];
    assert_eq!(code(&gridmarkov(dir.path(), &args)), 0);
    let o = dir.path().join("o");
    let first = fs::read(o.join("sweep.csv")).unwrap();
    let curve = fs::read_to_string(o.join("curve.csv")).unwrap();
    assert!(curve.starts_with("# manifest_sha256="));
    assert!(curve.contains("attack_size,corrupted_samples,detection_rate,reps"));
    assert!(fs::read_to_string(o.join("curve.svg")).unwrap().starts_with("<svg"));
    assert!(fs::read_dir(o.join("checkpoints")).unwrap().count() > 0);

    // Drop half of the checkpoints as if the run had been interrupted.
    let mut cps: Vec<_> = fs::read_dir(o.join("checkpoints")).unwrap().map(|e| e.unwrap().path()).collect();
    cps.sort();
    for p in cps.iter().skip(cps.len() / 2) {
        fs::remove_file(p).unwrap();
    }
    fs::remove_file(o.join("sweep.csv")).unwrap();
    assert_eq!(code(&gridmarkov(dir.path(), &args)), 0);
    assert_eq!(fs::read(o.join("sweep.csv")).unwrap(), first);
}

#[test]
fn anomaly_writes_scores_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_manifest(dir.path(), "");
    let out = gridmarkov(dir.path(), &["--manifest", &m, "--out", "o", "anomaly", "--attacked", "4,5,6", "--sizes", "0.5,1.0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let o = dir.path().join("o");
    let scores = fs::read_to_string(o.join("anomaly.csv")).unwrap();
    assert_eq!(scores.lines().count(), 2 + 2 * 13);
    let svg = fs::read_to_string(o.join("anomaly.svg")).unwrap();
    assert!(svg.contains("stroke-dasharray"));
    let empty = gridmarkov(dir.path(), &["--manifest", &m, "--out", "o", "anomaly", "--attacked", ""]);
    assert_eq!(code(&empty), 2);
}

#[test]
fn seed_and_reps_overrides_change_the_manifest_hash() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_manifest(dir.path(), "");
    gridmarkov(dir.path(), &["--manifest", &m, "--out", "a", "simulate", "--samples", "10"]);
    gridmarkov(dir.path(), &["--manifest", &m, "--out", "b", "--seed", "12", "simulate", "--samples", "10"]);
    let head = |d: &str| fs::read_to_string(dir.path().join(d).join("samples.csv")).unwrap().lines().next().unwrap().to_string();
    assert_ne!(head("a"), head("b"));
    assert!(head("b").ends_with("seed=12"));
}
