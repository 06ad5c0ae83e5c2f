//! Acceptance gate: one test per criterion, each printing a single
//! `ACCEPTANCE <n>: PASS — ...` line (visible with `--nocapture`) and
//! enforcing the criterion's tolerance and runtime budget.
//!
//! The scenario shared by most criteria is the controllable double
//! integrator on the unit horizon, steered from a point mass at the origin
//! to the Gaussian target centred at (1, 1) with a quarter of the free
//! terminal covariance. Criteria 1-10 exercise the library; criterion 11
//! drives the installed binary and hashes its artifacts.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{dmatrix, dvector, DMatrix};

use hypobridge::chain::LinearChainSpec;
use hypobridge::costs::{default_witnesses, verify_optimality_inequality, verify_prop4, verify_prop5};
use hypobridge::extremal::{
    prop6_check, tube_probability_ratio, tube_sup_distances, ExtremalPath, TUBE_MIN_HITS,
};
use hypobridge::grid::{Axis, Grid};
use hypobridge::htransform::{
    affine_control_schedule, build_h_gaussian_ratio, hjb_residual, simulate_controlled, Control,
    HField, InitialLaw, SimOptions,
};
use hypobridge::kernels::gaussian_kernel;
use hypobridge::measure::{GaussianMeasure, GridMeasure};
use hypobridge::rng::{stream_rng, StreamDomain};
use hypobridge::stats::{energy_distance_test, mean_stderr, paired_difference};

fn double_integrator() -> LinearChainSpec {
    LinearChainSpec::double_integrator(1.0)
}

/// Free terminal covariance of the double integrator at T = 1.
fn free_gramian() -> DMatrix<f64> {
    dmatrix![1.0, 0.5; 0.5, 1.0 / 3.0]
}

/// Steering target: N((1, 1)^T, Gramian / 4).
fn steering_target() -> GaussianMeasure {
    GaussianMeasure::new(dvector![1.0, 1.0], free_gramian() * 0.25).unwrap()
}

/// Bridge reweighting for the steering scenario (point start at the origin).
fn steering_field(spec: &LinearChainSpec) -> HField {
    build_h_gaussian_ratio(spec, &GaussianMeasure::dirac(dvector![0.0, 0.0]), &steering_target())
        .unwrap()
}

#[test]
fn acceptance_01_gramian_oracle() {
    let clock = Instant::now();
    let kernel = gaussian_kernel(&double_integrator(), 0.0, 1.0).unwrap();
    let expected = free_gramian();
    let worst = (kernel.cov() - &expected).amax();
    assert!(worst <= 1e-8, "double-integrator Gramian off by {worst:.3e}");

    // Triple integrator: phi(u) e_1 = (1, u, u^2/2), so the Gramian entries
    // are the monomial moments int_0^T u^{i+j} / (i! j!) du.
    let kernel3 = gaussian_kernel(&LinearChainSpec::triple_integrator(1.0), 0.0, 1.0).unwrap();
    let expected3 = dmatrix![
        1.0,       1.0 / 2.0, 1.0 / 6.0;
        1.0 / 2.0, 1.0 / 3.0, 1.0 / 8.0;
        1.0 / 6.0, 1.0 / 8.0, 1.0 / 20.0
    ];
    let worst3 = (kernel3.cov() - &expected3).amax();
    assert!(worst3 <= 1e-8, "triple-integrator Gramian off by {worst3:.3e}");

    let elapsed = clock.elapsed().as_secs_f64();
    assert!(elapsed < 1.0, "runtime budget exceeded: {elapsed:.2}s");
    println!(
        "ACCEPTANCE 1: PASS — Gramian oracles match to {:.1e} / {:.1e} ({elapsed:.2}s)",
        worst, worst3
    );
}

#[test]
fn acceptance_02_point_start_steering_identity() {
    let clock = Instant::now();
    let spec = double_integrator();
    let opts = SimOptions::new(1e-3, 100_000, 90_011);
    let report = verify_prop4(&spec, &dvector![0.0, 0.0], &steering_target(), &opts).unwrap();
    assert!(report.verdict, "failed checks: {:#?}", report.checks);
    for check in &report.checks {
        assert!(check.pass, "{}: {}", check.name, check.detail);
    }
    let sigmas = report.j_estimate.sigmas_from(report.target_identity);
    assert!(sigmas <= 3.0, "cost off the closed form by {sigmas:.2} sigma");

    let elapsed = clock.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "runtime budget exceeded: {elapsed:.2}s");
    println!(
        "ACCEPTANCE 2: PASS — J = {:.4} ± {:.4} vs H = {:.4} ({:.2} sigma, {elapsed:.1}s)",
        report.j_estimate.mean, report.j_estimate.stderr, report.target_identity, sigmas
    );
}

#[test]
fn acceptance_03_lattice_steering_identity() {
    let clock = Instant::now();
    let spec = double_integrator();
    let grid = Arc::new(
        Grid::new(vec![
            Axis::new(-1.6, 2.8, 61).unwrap(),
            Axis::new(-1.4, 2.6, 61).unwrap(),
        ])
        .unwrap(),
    );
    let start = grid.nearest_node(&dvector![0.0, 0.0]);
    let mut w0 = vec![0.0; grid.len()];
    w0[start] = 1.0;
    let mu0 = GridMeasure::new(grid.clone(), w0).unwrap();
    let target = steering_target();
    let mu_t =
        GridMeasure::from_density(grid.clone(), |y| target.log_density(y).unwrap().exp()).unwrap();

    let opts = SimOptions::new(2.5e-4, 4000, 90_031);
    let run = verify_prop5(&spec, grid.clone(), &mu0, &mu_t, 1e-9, 5000, &opts).unwrap();
    assert!(run.report.verdict, "failed checks: {:#?}", run.report.checks);

    let iterations = run.iteration_log.iterations();
    let final_err = run.iteration_log.max_errors().last().copied().unwrap();
    assert!(iterations < 5000, "needed {iterations} fixed-point iterations");
    assert!(final_err < 1e-8, "marginal error stalled at {final_err:.3e}");

    let rel = (run.report.j_estimate.mean - run.report.target_identity).abs()
        / run.report.target_identity.abs();
    assert!(rel <= 0.05, "relative cost error {rel:.4} exceeds 5%");

    let elapsed = clock.elapsed().as_secs_f64();
    assert!(elapsed < 300.0, "runtime budget exceeded: {elapsed:.2}s");
    println!(
        "ACCEPTANCE 3: PASS — 61x61 lattice: {iterations} iterations to {final_err:.1e}, \
         J = {:.4} vs {:.4} (rel {:.3}, {elapsed:.1}s)",
        run.report.j_estimate.mean, run.report.target_identity, rel
    );
}

#[test]
fn acceptance_04_reweighted_kernel_is_the_target_density() {
    let clock = Instant::now();
    let spec = double_integrator();
    let kernel = gaussian_kernel(&spec, 0.0, 1.0).unwrap();
    let h = steering_field(&spec);
    let x0 = dvector![0.0, 0.0];
    let log_h0 = h.log_h(0.0, &x0).unwrap();
    let target = steering_target();

    // Quadrature box: 5.6 marginal standard deviations around the target
    // mean leaves less than 1e-7 of mass outside, and the node spacing is
    // fine enough that the rectangle-rule error is negligible against 1e-6.
    let sx = target.cov()[(0, 0)].sqrt();
    let sy = target.cov()[(1, 1)].sqrt();
    let nodes = 181;
    let axis_x = Axis::new(1.0 - 5.6 * sx, 1.0 + 5.6 * sx, nodes).unwrap();
    let axis_y = Axis::new(1.0 - 5.6 * sy, 1.0 + 5.6 * sy, nodes).unwrap();
    let volume = (axis_x.max - axis_x.min) / (nodes - 1) as f64
        * ((axis_y.max - axis_y.min) / (nodes - 1) as f64);

    let mut mass = 0.0;
    let mut worst_gap = 0.0_f64;
    for ix in 0..nodes {
        for iy in 0..nodes {
            let y = dvector![
                axis_x.min + ix as f64 * (axis_x.max - axis_x.min) / (nodes - 1) as f64,
                axis_y.min + iy as f64 * (axis_y.max - axis_y.min) / (nodes - 1) as f64
            ];
            let q_h =
                (kernel.log_density(&x0, &y).unwrap() + h.log_h(1.0, &y).unwrap() - log_h0).exp();
            mass += q_h * volume;
            worst_gap = worst_gap.max((q_h - target.log_density(&y).unwrap().exp()).abs());
        }
    }
    assert!((mass - 1.0).abs() <= 1e-6, "reweighted kernel mass {mass}");
    assert!(worst_gap <= 1e-6, "density gap {worst_gap:.3e}");

    let elapsed = clock.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "runtime budget exceeded: {elapsed:.2}s");
    println!(
        "ACCEPTANCE 4: PASS — reweighted kernel integrates to 1{:+.1e} and matches the target \
         density to {:.1e} ({elapsed:.2}s)",
        mass - 1.0,
        worst_gap
    );
}

#[test]
fn acceptance_05_martingale_diagnostics() {
    let clock = Instant::now();
    let linear = double_integrator();
    let spec = linear.to_chain_spec();
    let h = steering_field(&linear);
    let x0 = dvector![0.0, 0.0];
    let log_h0 = h.log_h(0.0, &x0).unwrap();

    let mut opts = SimOptions::new(1e-3, 20_000, 90_051);
    opts.checkpoints = Some((1..=10).map(|i| i as f64 / 10.0).collect());
    let starts = [x0.clone()];
    let ensemble =
        simulate_controlled(&spec, Control::None, InitialLaw::States(&starts), &opts).unwrap();

    let times = ensemble.times().to_vec();
    let mut mean_zlogz: Vec<(f64, Vec<f64>)> = Vec::new();
    for (idx, &t) in times.iter().enumerate() {
        if t <= 0.0 {
            continue;
        }
        let states = ensemble.states_at(idx);
        let log_h_t = h.log_h_many(t, &states, spec.dim()).unwrap();
        let z: Vec<f64> = log_h_t.iter().map(|lh| (lh - log_h0).exp()).collect();
        let est = mean_stderr(&z);
        let sigmas = est.sigmas_from(1.0);
        assert!(
            sigmas <= 3.0,
            "E[z] = {:.4} ± {:.4} at t = {t} ({sigmas:.2} sigma from 1)",
            est.mean,
            est.stderr
        );
        let zlogz: Vec<f64> = z.iter().map(|v| if *v > 0.0 { v * v.ln() } else { 0.0 }).collect();
        mean_zlogz.push((t, zlogz));
    }
    assert_eq!(mean_zlogz.len(), 10, "expected 10 checkpoints");

    // z log z is a submartingale of the martingale z: consecutive paired
    // differences must be nonnegative within their Monte Carlo bands.
    for pair in mean_zlogz.windows(2) {
        let (t_lo, ref a) = pair[0];
        let (t_hi, ref b) = pair[1];
        let diff = paired_difference(b, a);
        assert!(
            diff.mean >= -3.0 * diff.stderr,
            "E[z log z] decreased from t={t_lo} to t={t_hi}: {:.4} ± {:.4}",
            diff.mean,
            diff.stderr
        );
    }

    let elapsed = clock.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "runtime budget exceeded: {elapsed:.2}s");
    println!(
        "ACCEPTANCE 5: PASS — E[z_t] = 1 within 3 sigma at 10 checkpoints, \
         E[z_t log z_t] nondecreasing ({elapsed:.1}s)"
    );
}

#[test]
fn acceptance_06_hjb_residual_in_the_bulk() {
    let clock = Instant::now();
    let linear = double_integrator();
    let spec = linear.to_chain_spec();
    let h = steering_field(&linear);
    let target = steering_target();
    let sx = target.cov()[(0, 0)].sqrt();
    let sy = target.cov()[(1, 1)].sqrt();

    use rand::Rng;
    let mut worst = 0.0_f64;
    for i in 0..100 {
        let mut rng = stream_rng(90_061, StreamDomain::Kernel, 0, i);
        let t = 0.1 + 0.8 * rng.random::<f64>();
        let x = dvector![
            1.0 + 3.0 * sx * (2.0 * rng.random::<f64>() - 1.0),
            1.0 + 3.0 * sy * (2.0 * rng.random::<f64>() - 1.0)
        ];
        let residual = hjb_residual(&h, &spec, t, &x, 1e-4).unwrap().abs();
        worst = worst.max(residual);
    }
    assert!(worst <= 1e-3, "largest residual {worst:.3e}");

    let elapsed = clock.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "runtime budget exceeded: {elapsed:.2}s");
    println!(
        "ACCEPTANCE 6: PASS — value-function residual <= {worst:.1e} at 100 bulk probes \
         ({elapsed:.2}s)"
    );
}

#[test]
fn acceptance_07_attained_terminal_law() {
    let clock = Instant::now();
    let linear = double_integrator();
    let spec = linear.to_chain_spec();
    let h = steering_field(&linear);
    let x0 = dvector![0.0, 0.0];
    let n = 10_000;

    let opts = SimOptions::new(1e-3, n, 90_071);
    let times = opts.time_grid(spec.horizon()).unwrap();
    let schedule = affine_control_schedule(&h, &spec, &times).unwrap();
    let starts = [x0];
    let ensemble =
        simulate_controlled(&spec, Control::Affine(&schedule), InitialLaw::States(&starts), &opts)
            .unwrap();
    let controlled = ensemble.terminal_flat();

    let target = steering_target();
    let mut direct = Vec::with_capacity(n * 2);
    for p in 0..n {
        let mut rng = stream_rng(90_072, StreamDomain::Ensemble, 9, p as u64);
        direct.extend_from_slice(target.sample(&mut rng).as_slice());
    }

    let report = energy_distance_test(&controlled, &direct, 2, 99, 90_073).unwrap();
    assert!(
        !report.rejects_at(0.01),
        "energy-distance test rejected: statistic {:.4}, p = {:.3}",
        report.statistic,
        report.p_value
    );

    let elapsed = clock.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "runtime budget exceeded: {elapsed:.2}s");
    println!(
        "ACCEPTANCE 7: PASS — energy-distance p = {:.2} over {n}+{n} terminal samples \
         ({elapsed:.1}s)",
        report.p_value
    );
}

#[test]
fn acceptance_08_extremal_invariance() {
    let clock = Instant::now();
    let linear = double_integrator();
    let spec = linear.to_chain_spec();
    let h = steering_field(&linear);
    let phi0 = dvector![0.0, 0.0];
    let phi_t = dvector![1.0, 1.0];

    let mut dists = Vec::new();
    for n_steps in [128usize, 256, 512] {
        let report = prop6_check(&spec, &h, &phi0, &phi_t, n_steps, false).unwrap();
        assert!(report.gate_passed, "gate residual {}", report.gate_max_residual);
        assert!(report.pass, "sup {} vs tol {}", report.sup_distance, report.tolerance);
        dists.push(report.sup_distance);
    }
    assert!(dists[2] <= 1e-4, "sup distance {} at 512 steps", dists[2]);
    for pair in dists.windows(2) {
        let rate = pair[0] / pair[1];
        assert!(
            (2.2..7.0).contains(&rate),
            "halving the step scaled the gap by {rate} ({dists:?})"
        );
    }

    // Negative control: a field for a chain with doubled coupling fails the
    // backward-equation probe, and forcing the comparison shows a genuinely
    // displaced extremal.
    let wrong = LinearChainSpec::new(
        2,
        1,
        1.0,
        dmatrix![0.0, 0.0; 2.0, 0.0],
        DMatrix::identity(1, 1),
    )
    .unwrap();
    let h_wrong =
        build_h_gaussian_ratio(&wrong, &GaussianMeasure::dirac(dvector![0.0, 0.0]), &steering_target())
            .unwrap();
    let refused = prop6_check(&spec, &h_wrong, &phi0, &phi_t, 256, false);
    assert!(refused.is_err(), "the probe must refuse a non-solution field");
    let forced = prop6_check(&spec, &h_wrong, &phi0, &phi_t, 256, true).unwrap();
    assert!(!forced.gate_passed && !forced.pass);
    assert!(forced.sup_distance > 1e-2, "forced distance {}", forced.sup_distance);

    let elapsed = clock.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "runtime budget exceeded: {elapsed:.2}s");
    println!(
        "ACCEPTANCE 8: PASS — extremal gap {:.1e} at 512 steps, second-order trend {:?}, \
         negative control displaced by {:.2} ({elapsed:.1}s)",
        dists[2], dists, forced.sup_distance
    );
}

#[test]
fn acceptance_09_tube_probability_ratios() {
    let clock = Instant::now();
    let spec = double_integrator().to_chain_spec();
    let k_steps = 400;
    let sine_path = |c: f64| -> ExtremalPath {
        let times: Vec<f64> = (0..=k_steps).map(|k| k as f64 / k_steps as f64).collect();
        let mut states = Vec::with_capacity(times.len() * 2);
        for t in &times {
            states.push(c * (std::f64::consts::PI * t).sin());
            states.push(c * (1.0 - (std::f64::consts::PI * t).cos()) / std::f64::consts::PI);
        }
        ExtremalPath::from_states(&spec, &times, &states).unwrap()
    };
    // Action of the sine arch of amplitude c is c^2 pi^2 / 4.
    let zero = sine_path(0.0);
    let half = sine_path((2.0_f64).sqrt() / std::f64::consts::PI);
    let one = sine_path(2.0 / std::f64::consts::PI);

    let n_paths = 120_000;
    let dt = 2.5e-3;
    let seed = 90_091;
    let sups = tube_sup_distances(&spec, &[&zero, &half, &one], n_paths, dt, seed).unwrap();
    let count =
        |dists: &[f64], eps: f64| dists.iter().filter(|s| **s <= eps).count() as u64;

    // Scan radii from coarse to fine; keep the finest radius at which every
    // tube still collects the minimum hit count.
    let mut chosen = None;
    for eps in [0.75, 0.60, 0.50] {
        let hits = [count(&sups[0], eps), count(&sups[1], eps), count(&sups[2], eps)];
        assert!(
            hits[0] > hits[1] && hits[1] > hits[2],
            "hit counts must decrease with the action: {hits:?} at eps {eps}"
        );
        if hits.iter().all(|h| *h >= TUBE_MIN_HITS) {
            chosen = Some((eps, hits));
        }
    }
    let (eps, hits) = chosen.expect("no radius kept every tube populated");
    for (idx, gap) in [(1usize, 0.5_f64), (2, 1.0)] {
        let ratio = hits[idx] as f64 / hits[0] as f64;
        let predicted = (-gap).exp();
        assert!(
            ratio >= 0.7 * predicted && ratio <= 1.3 * predicted,
            "ratio {ratio:.4} outside the +-30% band around {predicted:.4} at eps {eps}"
        );
    }

    // The pairwise report agrees with the sweep on the same streams.
    let report = tube_probability_ratio(&spec, &one, &zero, eps, n_paths, dt, seed).unwrap();
    assert_eq!(report.hits_a, hits[2]);
    assert_eq!(report.hits_b, hits[0]);

    let elapsed = clock.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "runtime budget exceeded: {elapsed:.2}s");
    println!(
        "ACCEPTANCE 9: PASS — tube ratios at eps {eps}: {:.3} vs e^-0.5, {:.3} vs e^-1 \
         (hits {hits:?}, {elapsed:.1}s)",
        hits[1] as f64 / hits[0] as f64,
        hits[2] as f64 / hits[0] as f64
    );
}

#[test]
fn acceptance_11_bridge_artifacts_are_deterministic() {
    let clock = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bridge.json");
    let config = serde_json::json!({
        "schema_version": 1,
        "model": { "preset": "double_integrator", "horizon": 1.0 },
        "marginals": {
            "mu0": { "dirac": [0.0, 0.0] },
            "mu_t": { "gaussian": {
                "mean": [1.0, 1.0],
                "cov": [[0.25, 0.125], [0.125, 1.0 / 12.0]],
            } },
        },
        "sim": { "dt": 2e-3, "n_paths": 4000, "seed": 90_111 },
        "outputs": { "write_terminal": true },
    });
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

    let run = |out: &str| {
        let out_dir = dir.path().join(out);
        let output = std::process::Command::new(env!("CARGO_BIN_EXE_hypobridge"))
            .arg("bridge")
            .arg("--config")
            .arg(&config_path)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(
            output.status.success(),
            "bridge run failed: {}{}",
            String::from_utf8_lossy(&output.stdout),
            String::from_utf8_lossy(&output.stderr)
        );
        let mut files: Vec<String> = std::fs::read_dir(&out_dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        files.sort();
        let contents: Vec<Vec<u8>> =
            files.iter().map(|f| std::fs::read(out_dir.join(f)).unwrap()).collect();
        (files, contents)
    };

    let (files_a, bytes_a) = run("run1");
    let (files_b, bytes_b) = run("run2");
    assert_eq!(
        files_a,
        vec!["cost_report.json", "manifest.json", "schedule.csv", "terminal.csv"],
        "unexpected artifact set"
    );
    assert_eq!(files_a, files_b);
    let mut hashes = Vec::new();
    for ((name, a), b) in files_a.iter().zip(&bytes_a).zip(&bytes_b) {
        assert_eq!(a, b, "{name} differs between identical runs");
        hashes.push(hypobridge_cli::artifacts::sha256_hex(a));
    }

    // The manifest must record the digests of the sibling artifacts.
    let manifest: serde_json::Value =
        serde_json::from_slice(&bytes_a[files_a.iter().position(|f| f == "manifest.json").unwrap()])
            .unwrap();
    for entry in manifest["artifacts"].as_array().unwrap() {
        let file = entry["file"].as_str().unwrap();
        let idx = files_a.iter().position(|f| f == file).unwrap();
        assert_eq!(
            entry["sha256"].as_str().unwrap(),
            hashes[idx],
            "manifest digest mismatch for {file}"
        );
    }
    assert_eq!(manifest["seed"].as_u64().unwrap(), 90_111);
    assert!(manifest["resolved_config"]["sim"]["n_paths"].as_u64().unwrap() == 4000);

    let elapsed = clock.elapsed().as_secs_f64();
    println!(
        "ACCEPTANCE 11: PASS — two runs produced byte-identical artifacts \
         (manifest sha256 {}, {elapsed:.1}s)",
        &hashes[files_a.iter().position(|f| f == "manifest.json").unwrap()][..12]
    );
}

#[test]
fn acceptance_10_optimality_inequality() {
    let clock = Instant::now();
    let spec = double_integrator();
    let witnesses = default_witnesses();
    let opts = SimOptions::new(1e-3, 10_000, 90_101);
    let report = verify_optimality_inequality(
        &spec,
        &dvector![0.0, 0.0],
        &steering_target(),
        &witnesses,
        &opts,
    )
    .unwrap();
    assert!(report.verdict, "failed checks: {:#?}", report.checks);
    for check in &report.checks {
        assert!(check.pass, "{}: {}", check.name, check.detail);
    }
    // The four offset witnesses must exceed the optimum by more than the
    // statistical band, not merely fail to undercut it.
    assert_eq!(report.checks.len(), 2 + witnesses.len());
    for check in &report.checks[2..6] {
        assert!(check.pass, "offset witness not separated: {}", check.detail);
    }

    let elapsed = clock.elapsed().as_secs_f64();
    assert!(elapsed < 180.0, "runtime budget exceeded: {elapsed:.2}s");
    println!(
        "ACCEPTANCE 10: PASS — optimum {:.4} ± {:.4} matches H = {:.4}; all {} witnesses \
         respect the inequality ({elapsed:.1}s)",
        report.j_estimate.mean,
        report.j_estimate.stderr,
        report.target_identity,
        witnesses.len()
    );
}
