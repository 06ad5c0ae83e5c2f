//! End-to-end contract tests for the binary: exit codes, artifact layout,
//! determinism across thread counts, and the seed override.

use std::path::{Path, PathBuf};
use std::process::Output;

use serde_json::{json, Value};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_hypobridge")
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    std::process::Command::new(bin()).args(args).output().unwrap()
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("process terminated by signal")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn point_bridge_config(dt: f64, n_paths: u64, seed: u64) -> Value {
    json!({
        "schema_version": 1,
        "model": { "preset": "double_integrator", "horizon": 1.0 },
        "marginals": {
            "mu0": { "dirac": [0.0, 0.0] },
            "mu_t": { "gaussian": {
                "mean": [1.0, 1.0],
                "cov": [[0.25, 0.125], [0.125, 1.0 / 12.0]],
            } },
        },
        "sim": { "dt": dt, "n_paths": n_paths, "seed": seed },
    })
}

#[test]
fn kernel_prints_the_gramian_and_repeats_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "model": { "preset": "double_integrator", "horizon": 1.0 },
            "sim": { "dt": 1e-2, "n_paths": 1, "seed": 7 },
        }),
    );
    let out1 = dir.path().join("k1");
    let first = run(&["kernel", "--config", config.to_str().unwrap(), "--out", out1.to_str().unwrap()]);
    assert_eq!(exit_code(&first), 0, "{}", stderr(&first));
    let text = stdout(&first);
    // Covariance of the double integrator over [0, 1]: [[1, 1/2], [1/2, 1/3]].
    assert!(text.contains("covariance"), "{text}");
    assert!(text.contains("0.500000") && text.contains("0.333333"), "{text}");
    assert!(text.contains("[PASS] Chapman-Kolmogorov composition"), "{text}");

    let out2 = dir.path().join("k2");
    let second = run(&["kernel", "--config", config.to_str().unwrap(), "--out", out2.to_str().unwrap()]);
    assert_eq!(exit_code(&second), 0);
    for file in ["kernel.json", "manifest.json"] {
        assert_eq!(
            std::fs::read(out1.join(file)).unwrap(),
            std::fs::read(out2.join(file)).unwrap(),
            "{file} differs between identical runs"
        );
    }
}

#[test]
fn kernel_runs_identically_on_one_thread() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "model": { "preset": "triple_integrator", "horizon": 1.0 },
            "grid": { "axes": [
                { "min": -3.0, "max": 3.0, "nodes": 9 },
                { "min": -2.0, "max": 2.0, "nodes": 9 },
                { "min": -1.5, "max": 1.5, "nodes": 9 },
            ] },
            "sim": { "dt": 1e-2, "n_paths": 2000, "seed": 11 },
            "kernel": { "method": "mc" },
        }),
    );
    let out_par = dir.path().join("par");
    let out_seq = dir.path().join("seq");
    let parallel =
        run(&["kernel", "--config", config.to_str().unwrap(), "--out", out_par.to_str().unwrap()]);
    assert_eq!(exit_code(&parallel), 0, "{}", stderr(&parallel));
    let sequential = run(&[
        "kernel",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_seq.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    assert_eq!(exit_code(&sequential), 0, "{}", stderr(&sequential));
    assert_eq!(
        std::fs::read(out_par.join("kernel.json")).unwrap(),
        std::fs::read(out_seq.join("kernel.json")).unwrap(),
        "thread count changed the Monte Carlo kernel bytes"
    );
}

#[test]
fn seed_flag_overrides_the_config_document() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &point_bridge_config(5e-3, 500, 1));
    let out = dir.path().join("out");
    let output = run(&[
        "bridge",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "4242",
    ]);
    assert_eq!(exit_code(&output), 0, "{}", stderr(&output));
    let manifest: Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"].as_u64().unwrap(), 4242);
    assert_eq!(manifest["resolved_config"]["sim"]["seed"].as_u64().unwrap(), 4242);
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();

    let missing = run(&["bridge", "--config", dir.path().join("absent.json").to_str().unwrap()]);
    assert_eq!(exit_code(&missing), 2);
    assert!(stderr(&missing).contains("config error"), "{}", stderr(&missing));

    let empty_path = dir.path().join("empty.json");
    std::fs::write(&empty_path, "").unwrap();
    let empty = run(&["verify", "--config", empty_path.to_str().unwrap()]);
    assert_eq!(exit_code(&empty), 2);

    let unknown_preset = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "model": { "preset": "septuple_integrator", "horizon": 1.0 },
            "sim": { "dt": 1e-2, "n_paths": 10, "seed": 1 },
        }),
    );
    let unknown = run(&["kernel", "--config", unknown_preset.to_str().unwrap()]);
    assert_eq!(exit_code(&unknown), 2);

    // Missing mandatory seed.
    let no_seed = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "model": { "preset": "double_integrator", "horizon": 1.0 },
            "sim": { "dt": 1e-2, "n_paths": 10 },
        }),
    );
    assert_eq!(exit_code(&run(&["kernel", "--config", no_seed.to_str().unwrap()])), 2);

    // Future schema.
    let future = write_config(
        dir.path(),
        &json!({
            "schema_version": 99,
            "model": { "preset": "double_integrator", "horizon": 1.0 },
            "sim": { "dt": 1e-2, "n_paths": 10, "seed": 1 },
        }),
    );
    assert_eq!(exit_code(&run(&["kernel", "--config", future.to_str().unwrap()])), 2);

    // Dimension mismatch between marginals and model.
    let mut bad_dim = point_bridge_config(1e-2, 10, 1);
    bad_dim["marginals"]["mu0"]["dirac"] = json!([0.0, 0.0, 0.0]);
    let bad_dim_path = write_config(dir.path(), &bad_dim);
    assert_eq!(exit_code(&run(&["bridge", "--config", bad_dim_path.to_str().unwrap()])), 2);

    // Mixed marginal kinds.
    let mut mixed = point_bridge_config(1e-2, 10, 1);
    mixed["marginals"]["mu0"] = json!({ "grid_dirac": [0.0, 0.0] });
    mixed["grid"] = json!({ "axes": [
        { "min": -1.0, "max": 1.0, "nodes": 5 },
        { "min": -1.0, "max": 1.0, "nodes": 5 },
    ] });
    let mixed_path = write_config(dir.path(), &mixed);
    assert_eq!(exit_code(&run(&["bridge", "--config", mixed_path.to_str().unwrap()])), 2);

    // Monte Carlo kernel without a lattice.
    let mc_no_grid = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "model": { "preset": "double_integrator", "horizon": 1.0 },
            "sim": { "dt": 1e-2, "n_paths": 100, "seed": 1 },
            "kernel": { "method": "mc" },
        }),
    );
    assert_eq!(exit_code(&run(&["kernel", "--config", mc_no_grid.to_str().unwrap()])), 2);

    // The extremal command without its section.
    let no_section = write_config(dir.path(), &point_bridge_config(1e-2, 10, 1));
    assert_eq!(exit_code(&run(&["extremal", "--config", no_section.to_str().unwrap()])), 2);

    // Verifying the extremal invariance needs a ratio field, which the
    // lattice marginal pair does not define.
    let lattice_extremal = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "model": { "preset": "double_integrator", "horizon": 1.0 },
            "grid": { "axes": [
                { "min": -1.0, "max": 1.0, "nodes": 5 },
                { "min": -1.0, "max": 1.0, "nodes": 5 },
            ] },
            "marginals": {
                "mu0": { "grid_dirac": [0.0, 0.0] },
                "mu_t": { "grid_gaussian": { "mean": [0.5, 0.0], "cov": [[0.1, 0.0], [0.0, 0.1]] } },
            },
            "extremal": { "phi0": [0.0, 0.0], "phi_t": [1.0, 1.0] },
            "sim": { "dt": 1e-2, "n_paths": 10, "seed": 1 },
        }),
    );
    assert_eq!(exit_code(&run(&["verify", "--config", lattice_extremal.to_str().unwrap()])), 2);

    // Usage error from the argument parser.
    let usage = run(&["bridge"]);
    assert_eq!(exit_code(&usage), 2);
}

#[test]
fn numeric_failures_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    // One fixed-point iteration cannot couple these marginals: the solver
    // reports divergence, which is a numeric failure, not a config error.
    let config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "model": { "preset": "double_integrator", "horizon": 1.0 },
            "grid": { "axes": [
                { "min": -1.6, "max": 2.8, "nodes": 21 },
                { "min": -1.4, "max": 2.6, "nodes": 21 },
            ] },
            "marginals": {
                "mu0": { "grid_dirac": [0.0, 0.0] },
                "mu_t": { "grid_gaussian": {
                    "mean": [1.0, 1.0],
                    "cov": [[0.25, 0.125], [0.125, 1.0 / 12.0]],
                } },
            },
            "solver": { "tol": 1e-12, "max_iter": 1 },
            "sim": { "dt": 1e-3, "n_paths": 100, "seed": 3 },
        }),
    );
    let out = dir.path().join("out");
    let output =
        run(&["bridge", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 3, "{}{}", stdout(&output), stderr(&output));
    assert!(stderr(&output).contains("numeric failure"), "{}", stderr(&output));
}

#[test]
fn failed_checks_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    // Four Euler steps cannot track the bridge: the moment checks fail far
    // outside their statistical bands while the pipeline itself succeeds.
    let config = write_config(dir.path(), &point_bridge_config(0.25, 20_000, 5));
    let out = dir.path().join("out");
    let output =
        run(&["bridge", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 1, "{}{}", stdout(&output), stderr(&output));
    let text = stdout(&output);
    assert!(text.contains("[FAIL]"), "{text}");
    assert!(text.contains("bridge: FAIL"), "{text}");
    // The report artifact still documents the failed run.
    let report: Value =
        serde_json::from_slice(&std::fs::read(out.join("cost_report.json")).unwrap()).unwrap();
    assert_eq!(report["body"]["report"]["verdict"], Value::Bool(false));
}

#[test]
fn lattice_bridge_pipeline_passes_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "model": { "preset": "double_integrator", "horizon": 1.0 },
            "grid": { "axes": [
                { "min": -1.6, "max": 2.8, "nodes": 61 },
                { "min": -1.4, "max": 2.6, "nodes": 61 },
            ] },
            "marginals": {
                "mu0": { "grid_dirac": [0.0, 0.0] },
                "mu_t": { "grid_gaussian": {
                    "mean": [1.0, 1.0],
                    "cov": [[0.25, 0.125], [0.125, 1.0 / 12.0]],
                } },
            },
            "solver": { "tol": 1e-9, "max_iter": 5000 },
            "sim": { "dt": 4e-4, "n_paths": 1500, "seed": 90_121 },
        }),
    );
    let out = dir.path().join("out");
    let output =
        run(&["bridge", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 0, "{}{}", stdout(&output), stderr(&output));
    for file in ["cost_report.json", "potentials.csv", "iterations.csv", "manifest.json"] {
        assert!(out.join(file).exists(), "missing artifact {file}");
    }
    let potentials = std::fs::read_to_string(out.join("potentials.csv")).unwrap();
    assert!(potentials.starts_with("node,nu0,log_rho_t\n"));
    assert_eq!(potentials.lines().count(), 61 * 61 + 1);
}

#[test]
fn extremal_command_reports_invariance_and_negative_control() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = point_bridge_config(1e-2, 10, 42);
    base["extremal"] = json!({ "phi0": [0.0, 0.0], "phi_t": [1.0, 1.0], "n_steps": 128 });
    let config = write_config(dir.path(), &base);
    let out = dir.path().join("positive");
    let output =
        run(&["extremal", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 0, "{}{}", stdout(&output), stderr(&output));
    for file in
        ["prop6_report.json", "extremal_free.csv", "extremal_transformed.csv", "manifest.json"]
    {
        assert!(out.join(file).exists(), "missing artifact {file}");
    }
    let free = std::fs::read_to_string(out.join("extremal_free.csv")).unwrap();
    assert!(free.starts_with("t,phi_1_1,phi_2_1,phidot_1_1,phidot_2_1\n"));
    assert_eq!(free.lines().count(), 128 + 2);

    base["extremal"]["negative_control"] = json!(true);
    let config = write_config(dir.path(), &base);
    let out = dir.path().join("negative");
    let output =
        run(&["extremal", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 0, "{}{}", stdout(&output), stderr(&output));
    let report: Value =
        serde_json::from_slice(&std::fs::read(out.join("prop6_report.json")).unwrap()).unwrap();
    assert_eq!(report["body"]["negative_control"], Value::Bool(true));
    assert_eq!(report["body"]["verdict"], Value::Bool(true));
    assert_eq!(report["body"]["report"]["gate_passed"], Value::Bool(false));
    assert!(stdout(&output).contains("rejected by the backward-equation probe"));
}

#[test]
fn verify_aggregates_the_invariant_suite() {
    let dir = tempfile::tempdir().unwrap();
    let mut config_value = point_bridge_config(2e-3, 8000, 90_131);
    config_value["extremal"] =
        json!({ "phi0": [0.0, 0.0], "phi_t": [1.0, 1.0], "n_steps": 256 });
    let config = write_config(dir.path(), &config_value);
    let out = dir.path().join("out");
    let output =
        run(&["verify", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 0, "{}{}", stdout(&output), stderr(&output));
    let text = stdout(&output);
    for name in [
        "noise reaches every block (controllability)",
        "Chapman-Kolmogorov composition",
        "steering identity (point start)",
        "value function solves the control equation in the bulk",
        "reweighting ratio is a martingale under the free law",
        "tube probabilities follow the action gap",
        "extremal invariance under reweighting",
    ] {
        assert!(text.contains(&format!("[PASS] {name}")), "missing check line: {name}\n{text}");
    }
    let report: Value =
        serde_json::from_slice(&std::fs::read(out.join("verify_report.json")).unwrap()).unwrap();
    assert_eq!(report["body"]["verdict"], Value::Bool(true));
    assert_eq!(report["body"]["checks"].as_array().unwrap().len(), 7);
}
