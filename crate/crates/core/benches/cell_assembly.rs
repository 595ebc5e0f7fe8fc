//! Compares the data-parallel and sequential per-cell assembly +
//! condensation paths on a mid-size 2D mesh.
//!
//! The parallel path is compiled in via the default `parallel` feature;
//! building the bench with `--no-default-features` measures the sequential
//! fallback under the same harness.

use criterion::{criterion_group, criterion_main, Criterion};
use driftdg::device::DeviceSpec;
use driftdg::hdg::HdgSystem;
use driftdg::mesh::Mesh;
use driftdg::physics::MaterialParams;
use driftdg::solver::Discretization;
use std::hint::black_box;

fn build() -> (HdgSystem, driftdg::hdg::DiscreteState) {
    let device = DeviceSpec::preset("circular2d").unwrap();
    let mesh = Mesh::uniform_2d(device.lo_um, device.hi_um, 24, 24, &device.contacts).unwrap();
    let prob = device.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
    let system = HdgSystem::new(mesh, device.doping.clone(), prob, device.contacts.len());
    let state = system.equilibrium_state();
    (system, state)
}

fn bench_newton_step(c: &mut Criterion) {
    let (system, state) = build();
    let bias = vec![0.0, 0.0];
    let mode = if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential"
    };
    c.bench_function(&format!("newton_step_24x24_{mode}"), |b| {
        b.iter(|| {
            let out = system.newton_step(black_box(&state), black_box(&bias)).unwrap();
            black_box(out.0)
        })
    });
    c.bench_function(&format!("residual_norm_24x24_{mode}"), |b| {
        b.iter(|| {
            let out = system.residual_norm(black_box(&state), black_box(&bias)).unwrap();
            black_box(out)
        })
    });
}

criterion_group!(benches, bench_newton_step);
criterion_main!(benches);
