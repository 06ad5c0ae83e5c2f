//! Parallel-versus-sequential benchmarks for the two data-parallel hot
//! loops: ensemble simulation of the steered diffusion and Monte Carlo
//! kernel assembly on a lattice. The same binary measures both modes by
//! toggling [`hypobridge::par::force_sequential`]; work items derive their
//! RNG streams from their indices, so the outputs are bit-identical and the
//! comparison is purely about scheduling overhead and speed-up. When the
//! crate is built without the `parallel` feature both rows measure the
//! sequential fallback.
//!
//! Run with `cargo bench -p hypobridge`.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hypobridge::chain::LinearChainSpec;
use hypobridge::grid::{Axis, Grid};
use hypobridge::htransform::{
    affine_control_schedule, build_h_gaussian_ratio, simulate_controlled, AffineStep, Control,
    HField, InitialLaw, SimOptions,
};
use hypobridge::kernels::{mc_kernel, McKernelOptions};
use hypobridge::measure::GaussianMeasure;
use hypobridge::par;
use nalgebra::{dmatrix, dvector};

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn steering_field(spec: &LinearChainSpec) -> HField {
    let target = GaussianMeasure::new(
        dvector![1.0, 1.0],
        dmatrix![1.0, 0.5; 0.5, 1.0 / 3.0] * 0.25,
    )
    .unwrap();
    build_h_gaussian_ratio(spec, &GaussianMeasure::dirac(dvector![0.0, 0.0]), &target).unwrap()
}

/// Steered double-integrator ensemble: 4096 Euler-Maruyama paths over 400
/// steps, driven by the precomputed affine schedule.
fn bench_ensemble(c: &mut Criterion) {
    let linear = LinearChainSpec::double_integrator(1.0);
    let spec = linear.to_chain_spec();
    let field = steering_field(&linear);
    let opts = SimOptions::new(2.5e-3, 4096, 17);
    let times = opts.time_grid(linear.horizon()).unwrap();
    let schedule: Vec<AffineStep> = affine_control_schedule(&field, &spec, &times).unwrap();
    let starts = [dvector![0.0, 0.0]];

    let mut group = c.benchmark_group("ensemble_simulation");
    group.sample_size(10);
    for (mode, sequential) in MODES {
        group.bench_function(BenchmarkId::new(mode, opts.n_paths), |b| {
            par::force_sequential(sequential);
            b.iter(|| {
                let ensemble = simulate_controlled(
                    &spec,
                    Control::Affine(&schedule),
                    InitialLaw::States(&starts),
                    &opts,
                )
                .unwrap();
                black_box(ensemble.terminal_flat().len())
            });
            par::force_sequential(false);
        });
    }
    group.finish();
}

/// Transition-kernel estimate onto a 31x31 lattice from a single source
/// node: 4096 paths of 400 steps plus the mollified terminal deposit.
fn bench_mc_kernel(c: &mut Criterion) {
    let linear = LinearChainSpec::double_integrator(1.0);
    let spec = linear.to_chain_spec();
    let grid = Arc::new(
        Grid::new(vec![Axis::new(-1.6, 2.8, 31).unwrap(), Axis::new(-1.4, 2.6, 31).unwrap()])
            .unwrap(),
    );
    let source = grid.nearest_node(&dvector![0.0, 0.0]);
    let opts = McKernelOptions::new(4096, 2.5e-3, 23);

    let mut group = c.benchmark_group("mc_kernel_assembly");
    group.sample_size(10);
    for (mode, sequential) in MODES {
        group.bench_function(BenchmarkId::new(mode, opts.n_paths), |b| {
            par::force_sequential(sequential);
            b.iter(|| {
                let kernel =
                    mc_kernel(&spec, 0.0, &[source], linear.horizon(), grid.clone(), &opts)
                        .unwrap();
                black_box(kernel.raw_mass(0))
            });
            par::force_sequential(false);
        });
    }
    group.finish();
}

criterion_group!(benches, bench_ensemble, bench_mc_kernel);
criterion_main!(benches);
