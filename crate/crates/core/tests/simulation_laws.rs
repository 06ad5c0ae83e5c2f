//! Law-level checks of the Euler-Maruyama simulator against closed forms.
//!
//! For the double integrator started at the origin, the time-T state is
//! Gaussian with covariance equal to the controllability Gramian
//! `Sigma(T) = [[T, T^2/2], [T^2/2, T^3/3]]`; at `T = 1` that is
//! `[[1, 1/2], [1/2, 1/3]]`. The sample covariance of `n` Gaussian draws has
//! `Var(C_ij) = (C_ii C_jj + C_ij^2) / (n - 1)`, which calibrates the
//! acceptance bands.

use hypobridge::chain::LinearChainSpec;
use hypobridge::htransform::{simulate_controlled, Control, InitialLaw, SimOptions};
use hypobridge::measure::GaussianMeasure;
use hypobridge::stats::sample_mean_cov;
use nalgebra::{dmatrix, dvector};

#[test]
fn uncontrolled_double_integrator_reproduces_the_gramian() {
    let spec = LinearChainSpec::double_integrator(1.0).to_chain_spec();
    let init = GaussianMeasure::dirac(dvector![0.0, 0.0]);
    let opts = SimOptions::new(1e-3, 100_000, 7_000_000);
    let ens = simulate_controlled(&spec, Control::None, InitialLaw::Gaussian(&init), &opts)
        .expect("simulation succeeds");
    assert!(ens.energy().iter().all(|&e| e == 0.0));
    assert!(ens.girsanov_logw().iter().all(|&g| g == 0.0));

    let (mean, cov) = sample_mean_cov(&ens.terminal_flat(), 2);
    let want = dmatrix![1.0, 0.5; 0.5, 1.0 / 3.0];
    let n = ens.n_paths() as f64;

    for i in 0..2 {
        let se = (want[(i, i)] / n).sqrt();
        assert!(
            mean[i].abs() <= 3.0 * se,
            "terminal mean_{i} = {} (se {se:e})",
            mean[i]
        );
    }
    for i in 0..2 {
        for j in i..2 {
            let se = ((want[(i, i)] * want[(j, j)] + want[(i, j)].powi(2)) / (n - 1.0)).sqrt();
            let dev = (cov[(i, j)] - want[(i, j)]).abs();
            assert!(
                dev <= 3.0 * se,
                "cov_{i}{j} = {} vs {} (dev {dev:e}, se {se:e})",
                cov[(i, j)],
                want[(i, j)]
            );
        }
    }
}
