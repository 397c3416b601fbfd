use std::process::Command;

use koopdeepc_harness::config::{ExperimentConfig, ExperimentKind};
use koopdeepc_harness::envelope;
use koopdeepc_harness::error::HarnessError;
use koopdeepc_harness::experiments::{run_experiment, RunOptions};

fn opts(dir: &std::path::Path) -> RunOptions {
    RunOptions {
        out_dir: dir.to_path_buf(),
        force: false,
    }
}

fn config_error(json: &str) -> (String, String) {
    match ExperimentConfig::from_json_str(json) {
        Err(HarnessError::Config { path, message }) => (path, message),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn schema_errors_name_the_field() {
    let (path, _) = config_error(r#"{"mpc": {"l_pred": "fourteen"}}"#);
    assert_eq!(path, "mpc.l_pred");
    let (path, msg) = config_error(r#"{"plant": {"dt": 0.001, "inertia": 3}}"#);
    assert_eq!(path, "plant.inertia");
    assert!(msg.contains("inertia"), "{msg}");
    let (path, _) = config_error(r#"{"sweep": {"param": "horizon"}}"#);
    assert_eq!(path, "sweep.param");
    let (path, _) = config_error(r#"{"kind": "run"}"#);
    assert_eq!(path, "kind");
}

#[test]
fn validation_requires_seed_and_matching_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    match run_experiment(ExperimentKind::Certify, &cfg, &opts(dir.path())) {
        Err(HarnessError::Config { path, .. }) => assert_eq!(path, "seed"),
        other => panic!("{other:?}"),
    }
    // Bounds are deterministic and need no seed.
    assert!(run_experiment(ExperimentKind::Bounds, &cfg, &opts(dir.path())).unwrap().passed());
    let cfg = ExperimentConfig::from_json_str(r#"{"kind": "represent", "seed": 3}"#).unwrap();
    match run_experiment(ExperimentKind::Certify, &cfg, &opts(dir.path())) {
        Err(HarnessError::Config { path, .. }) => assert_eq!(path, "kind"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn closed_loop_is_gated_on_excitation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json_str(r#"{"seed": 1, "data": {"len": 40}, "mpc": {"duration": 0.3}}"#).unwrap();
    match run_experiment(ExperimentKind::ClosedLoop, &cfg, &opts(dir.path())) {
        Err(HarnessError::Gated(msg)) => assert!(msg.contains("excitation"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let forced = RunOptions {
        out_dir: dir.path().to_path_buf(),
        force: true,
    };
    let out = run_experiment(ExperimentKind::ClosedLoop, &cfg, &forced).unwrap();
    let json = std::fs::read_to_string(dir.path().join("closed_loop.json")).unwrap();
    assert!(json.contains("\"forced\": true"));
    assert!(out.files.iter().any(|f| f.ends_with("closed_loop.csv")));
}

#[test]
fn short_closed_loop_writes_consistent_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json_str(r#"{"seed": 5, "mpc": {"duration": 0.6, "basin_offsets": [0.1]}}"#).unwrap();
    let out = run_experiment(ExperimentKind::ClosedLoop, &cfg, &opts(dir.path())).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("closed_loop.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("t,delta,omega,Eq_prime,u,omega_tilde,P_e"), "{header}");
    let iterations = cfg.mpc.iterations(cfg.plant.dt);
    assert_eq!(csv.lines().count(), 1 + 7 * (iterations + 1));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("closed_loop.json")).unwrap()).unwrap();
    assert_eq!(report["summary"]["basin"].as_array().unwrap().len(), 1);
    let solver = out.checks.iter().find(|c| c.name == "solver").unwrap();
    assert!(solver.passed, "{}", solver.detail);
    assert!(iterations >= envelope::MIN_ITERATIONS);
}

#[test]
fn sweep_without_closed_loop_scales_eps_a() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json_str(r#"{"seed": 2, "sweep": {"closed_loop": false}}"#).unwrap();
    let out = run_experiment(ExperimentKind::Sweep, &cfg, &opts(dir.path())).unwrap();
    assert!(out.passed(), "{:?}", out.checks);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn rerun_is_byte_identical() {
    let cfg = ExperimentConfig::from_json_str(r#"{"seed": 9, "certify": {"n_samples": 500, "write_samples": true}}"#).unwrap();
    for kind in [ExperimentKind::Certify, ExperimentKind::Represent, ExperimentKind::Bounds] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let oa = run_experiment(kind, &cfg, &opts(a.path())).unwrap();
        let ob = run_experiment(kind, &cfg, &opts(b.path())).unwrap();
        assert_eq!(oa.checks, ob.checks);
        for (fa, fb) in oa.files.iter().zip(&ob.files) {
            assert_eq!(std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap(), "{}", fa.display());
        }
    }
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_koopdeepc");
    let dir = tempfile::tempdir().unwrap();
    let ok = Command::new(bin)
        .args(["bounds", "--out"])
        .arg(dir.path().join("b"))
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS tight_below_loose"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"bounds": {"l_pred": -1}}"#).unwrap();
    let err = Command::new(bin).args(["bounds", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(err.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&err.stderr).contains("bounds.l_pred"));

    let seeded = Command::new(bin)
        .args(["represent", "--seed", "4", "--out"])
        .arg(dir.path().join("r"))
        .output()
        .unwrap();
    assert_eq!(seeded.status.code(), Some(0));

    // A failing assertion gives exit code 1.
    let strict = dir.path().join("strict.json");
    std::fs::write(&strict, r#"{"represent": {"corrupt_min": 1e6}}"#).unwrap();
    let fail = Command::new(bin)
        .args(["represent", "--seed", "4", "--config"])
        .arg(&strict)
        .arg("--out")
        .arg(dir.path().join("r2"))
        .output()
        .unwrap();
    assert_eq!(fail.status.code(), Some(1));
}
