//! End-to-end tests of the compiled binary: exit codes, side-effect rules, and
//! the artifact flow from `precompute` through `accuracy` and `mc`.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gppce::config::RunConfig;

fn gppce_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gppce"))
}

fn run(args: &[&str]) -> Output {
    gppce_bin().args(args).output().expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Desk-scale config small enough for test smoke runs.
fn tiny_config(dir: &Path) -> String {
    let mut cfg = RunConfig::default();
    cfg.ocp.horizon = 3;
    cfg.ocp.substeps = 10;
    cfg.ocp.t_batch_min = 300.0;
    cfg.ocp.t_batch_max = 6000.0;
    cfg.ocp.solver.max_iter = 40;
    cfg.mc.n_runs = 2;
    cfg.mc.n_mc = 300;
    cfg.mc.n_u = 1;
    cfg.mc.accuracy_t_batch = 4000.0;
    cfg.mc.accuracy_sizes = vec![15];
    cfg.output.dir = dir.join("out").to_string_lossy().into_owned();
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_exits_zero_and_lists_commands() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    for cmd in ["precompute", "accuracy", "mc"] {
        assert!(text.contains(cmd), "usage is missing {cmd}: {text}");
    }
}

#[test]
fn invalid_flag_fails_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("never");
    let out = gppce_bin()
        .args(["--out", out_dir.to_str().unwrap(), "precompute", "--bogus"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!out_dir.exists(), "failed invocation must not create outputs");
}

#[test]
fn unknown_controller_is_rejected() {
    let out = run(&["mc", "--controller", "multistage"]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("unscented"), "error should list the choices");
}

#[test]
fn precompute_writes_reloadable_bundles_idempotently() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out_dir = dir.path().join("out");

    let first = run(&["--config", &config, "precompute"]);
    assert!(first.status.success(), "stderr: {}", stderr_of(&first));
    let names = [
        "precompute_path.json",
        "precompute_namw.json",
        "precompute_ppm.json",
        "precompute_objective.json",
    ];
    let before: Vec<Vec<u8>> =
        names.iter().map(|n| fs::read(out_dir.join(n)).unwrap()).collect();

    // Reload equals the in-memory build, and a rerun leaves identical bytes.
    let cfg = RunConfig::load(Path::new(&config)).unwrap();
    let loaded = gppce::bundle::load_families(&out_dir).unwrap();
    assert_eq!(loaded, cfg.build_families().unwrap());

    let second = run(&["--config", &config, "precompute"]);
    assert!(second.status.success());
    for (name, old) in names.iter().zip(&before) {
        assert_eq!(&fs::read(out_dir.join(name)).unwrap(), old, "{name} changed on rerun");
    }
}

#[test]
fn precompute_refuses_design_smaller_than_basis() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    // Nine points cannot identify the ten coefficients of the order-2 basis.
    cfg.design.n_s = 9;
    cfg.output.dir = dir.path().join("out").to_string_lossy().into_owned();
    let path = dir.path().join("config.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();

    let out = run(&["--config", path.to_str().unwrap(), "precompute"]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("n_phi"), "stderr: {}", stderr_of(&out));
}

#[test]
fn accuracy_without_bundles_points_at_precompute() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--out", dir.path().to_str().unwrap(), "accuracy"]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("precompute"), "stderr: {}", stderr_of(&out));
}

#[test]
fn accuracy_writes_deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    assert!(run(&["--config", &config, "precompute"]).status.success());

    let first = run(&["--config", &config, "accuracy"]);
    assert!(first.status.success(), "stderr: {}", stderr_of(&first));
    let csv = out_dir.join("accuracy.csv");
    let a = fs::read(&csv).unwrap();
    assert!(String::from_utf8_lossy(&a).starts_with("u_id,function,estimator,"));

    let second = run(&["--config", &config, "accuracy"]);
    assert!(second.status.success());
    assert_eq!(fs::read(&csv).unwrap(), a, "repeat run changed accuracy.csv");
}

#[test]
fn mc_nominal_writes_outputs_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out_dir = dir.path().join("out");

    let out = run(&["--config", &config, "mc", "--controller", "nominal", "--runs", "2"]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("violation fractions"), "stdout: {text}");
    assert!(text.contains("batch time"), "stdout: {text}");
    for name in ["mc_runs.csv", "mc_summary.json", "ocp_log.csv"] {
        assert!(out_dir.join("nominal").join(name).exists(), "missing {name}");
    }
}
