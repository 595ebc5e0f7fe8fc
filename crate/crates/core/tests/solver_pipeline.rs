//! End-to-end solves on small meshes: equilibrium convergence, condensation
//! vs monolithic oracle, continuation sweeps and cross-backend agreement.

use driftdg::device::DeviceSpec;
use driftdg::fvsg::FvsgSystem;
use driftdg::hdg::HdgSystem;
use driftdg::mesh::{Mesh, SchemeTag};
use driftdg::physics::MaterialParams;
use driftdg::solver::{newton_solve, voltage_sweep, ContactSet, Discretization, NewtonOptions, SweepOptions};

fn material() -> MaterialParams {
    MaterialParams::silicon_300k()
}

fn contact_set(device: &DeviceSpec, prob: &driftdg::physics::ScaledProblem) -> ContactSet {
    let x_star_um = prob.bases.x_star_um();
    let names = device.contacts.iter().map(|c| c.name.clone()).collect();
    let length_scaled = device
        .contacts
        .iter()
        .map(|c| {
            if device.dim == 1 {
                1.0
            } else {
                c.segments.iter().map(|s| (s.to_um - s.from_um) / x_star_um).sum()
            }
        })
        .collect();
    let area_cm2 = (0..device.contacts.len())
        .map(|c| device.contact_area_cm2(c))
        .collect();
    ContactSet {
        names,
        length_scaled,
        area_cm2,
        j_star: prob.bases.j_star,
        v_star: prob.bases.v_star,
    }
}

fn ha_system(device: &DeviceSpec, cells: usize) -> HdgSystem {
    let prob = device.scaled_problem(&material()).unwrap();
    let mut mesh = Mesh::uniform_1d(device.lo_um[0], device.hi_um[0], cells, &device.contacts).unwrap();
    mesh.assign_schemes(&vec![SchemeTag::Ha; cells]).unwrap();
    HdgSystem::new(mesh, device.doping.clone(), prob, device.contacts.len())
}

#[test]
fn fvsg_equilibrium_converges_case3() {
    let device = DeviceSpec::preset("abrupt3").unwrap();
    let prob = device.scaled_problem(&material()).unwrap();
    let sys = FvsgSystem::from_device(&device, prob, 100).unwrap();
    let mut state = sys.equilibrium_state();
    let report = newton_solve(&sys, &mut state, &[0.0, 0.0], &NewtonOptions::default()).unwrap();
    assert!(report.converged, "{:?}", report.failure);
    assert!(state.n.iter().all(|v| *v >= 0.0));
}

#[test]
fn hdg_ha_equilibrium_converges_case3() {
    let device = DeviceSpec::preset("abrupt3").unwrap();
    let sys = ha_system(&device, 100);
    let mut state = sys.equilibrium_state();
    let report = newton_solve(&sys, &mut state, &[0.0, 0.0], &NewtonOptions::default()).unwrap();
    assert!(report.converged, "{:?} history {:?}", report.failure, report.residual_history);
}

#[test]
fn zero_iterations_when_already_converged() {
    let device = DeviceSpec::preset("abrupt3").unwrap();
    let sys = ha_system(&device, 20);
    let mut state = sys.equilibrium_state();
    let opts = NewtonOptions::default();
    let first = newton_solve(&sys, &mut state, &[0.0, 0.0], &opts).unwrap();
    assert!(first.converged);
    // Re-enter with the converged state and a residual-level tolerance: no
    // iterations are taken.
    let mut opts2 = opts.clone();
    opts2.eps_tol = first.final_residual().max(1e-14) * 10.0;
    let second = newton_solve(&sys, &mut state, &[0.0, 0.0], &opts2).unwrap();
    assert!(second.converged);
    assert_eq!(second.iterations, 0);
}

#[test]
fn condensed_equals_monolithic_every_backend_scheme() {
    for scheme in [SchemeTag::Ha, SchemeTag::Conventional(1), SchemeTag::Conventional(2)] {
        let device = DeviceSpec::preset("abrupt3").unwrap();
        let prob = device.scaled_problem(&material()).unwrap();
        let mut mesh = Mesh::uniform_1d(0.0, 20.0, 4, &device.contacts).unwrap();
        mesh.assign_schemes(&vec![scheme; 4]).unwrap();
        let sys = HdgSystem::new(mesh, device.doping.clone(), prob, 2);
        let state = sys.equilibrium_state();
        let bias = vec![0.0, 0.2];
        let (rn_c, delta_c) = sys.newton_step(&state, &bias).unwrap();
        let (rn_m, delta_m) = sys.monolithic_newton_step(&state, &bias).unwrap();
        assert_eq!(rn_c, rn_m);
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (a, b) in delta_c.traces.iter().zip(&delta_m.traces) {
            num = num.max((a - b).abs());
            den = den.max(a.abs());
        }
        for (ca, cb) in delta_c.cells.iter().zip(&delta_m.cells) {
            for (a, b) in ca.iter().zip(cb) {
                num = num.max((a - b).abs());
                den = den.max(a.abs());
            }
        }
        assert!(num <= 1e-10 * den.max(1.0), "{scheme:?}: {num} vs scale {den}");
    }
}

#[test]
fn condensed_equals_monolithic_2d_with_hanging_nodes() {
    let device = DeviceSpec::preset("circular2d").unwrap();
    let prob = device.scaled_problem(&material()).unwrap();
    let mesh = Mesh::uniform_2d(device.lo_um, device.hi_um, 2, 2, &device.contacts).unwrap();
    let mut mesh = mesh.refine(&[3]).unwrap();
    let tags: Vec<SchemeTag> = (0..mesh.cells.len())
        .map(|i| if i % 2 == 0 { SchemeTag::Ha } else { SchemeTag::Conventional(2) })
        .collect();
    mesh.assign_schemes(&tags).unwrap();
    mesh.audit().unwrap();
    let sys = HdgSystem::new(mesh, device.doping.clone(), prob, 2);
    let state = sys.equilibrium_state();
    let bias = vec![0.0, 0.1];
    let (_, delta_c) = sys.newton_step(&state, &bias).unwrap();
    let (_, delta_m) = sys.monolithic_newton_step(&state, &bias).unwrap();
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (a, b) in delta_c.traces.iter().zip(&delta_m.traces) {
        num = num.max((a - b).abs());
        den = den.max(a.abs());
    }
    assert!(num <= 1e-10 * den.max(1.0), "{num} vs {den}");
    // Constraint satisfaction after applying the step.
    let mut s2 = state.clone();
    sys.apply_step(&mut s2, &delta_c, 1.0);
    assert!(sys.layout.constraint_violation(&s2.traces) <= 1e-13);
}

#[test]
fn two_cell_ha_sweep_reaches_bias() {
    let device = DeviceSpec::preset("abrupt3").unwrap();
    let prob = device.scaled_problem(&material()).unwrap();
    let sys = ha_system(&device, 2);
    let mut state = sys.equilibrium_state();
    let nopts = NewtonOptions::default();
    let eq = newton_solve(&sys, &mut state, &[0.0, 0.0], &nopts).unwrap();
    assert!(eq.converged);
    let contacts = contact_set(&device, &prob);
    let sweep = SweepOptions::new(vec![0.0, 0.8]);
    let (table, report) =
        voltage_sweep(&sys, &mut state, &[0.0, 0.0], &sweep, &nopts, &contacts).unwrap();
    assert!(report.completed, "failed at {:?}", report.failed_at_v);
    assert!(table.is_monotone());
    let last = table.rows.last().unwrap();
    assert!((last.bias_v[1] - 0.8).abs() < 1e-12);
}

#[test]
fn sweep_with_target_equal_to_current_bias_is_single_point() {
    let device = DeviceSpec::preset("abrupt3").unwrap();
    let prob = device.scaled_problem(&material()).unwrap();
    let sys = ha_system(&device, 10);
    let mut state = sys.equilibrium_state();
    let nopts = NewtonOptions::default();
    newton_solve(&sys, &mut state, &[0.0, 0.0], &nopts).unwrap();
    let contacts = contact_set(&device, &prob);
    let sweep = SweepOptions::new(vec![0.0, 0.0]);
    let (table, report) =
        voltage_sweep(&sys, &mut state, &[0.0, 0.0], &sweep, &nopts, &contacts).unwrap();
    assert!(report.completed);
    assert_eq!(table.rows.len(), 1);
}

#[test]
fn fvsg_and_hdg_ha_agree_on_shared_grid_case3() {
    // Both backends reduce to Bernoulli-flux balances on the same nodes.
    let device = DeviceSpec::preset("abrupt3").unwrap();
    let prob = device.scaled_problem(&material()).unwrap();
    let cells = 100;
    let nopts = NewtonOptions {
        eps_tol: 1e-10,
        eps_rel: 1e-12,
        ..Default::default()
    };
    let contacts = contact_set(&device, &prob);

    let fv = FvsgSystem::from_device(&device, prob.clone(), cells).unwrap();
    let mut fv_state = fv.equilibrium_state();
    assert!(newton_solve(&fv, &mut fv_state, &[0.0, 0.0], &nopts).unwrap().converged);
    let sweep = SweepOptions::new(vec![0.0, 0.8]);
    let (_, rep) = voltage_sweep(&fv, &mut fv_state, &[0.0, 0.0], &sweep, &nopts, &contacts).unwrap();
    assert!(rep.completed);

    let ha = ha_system(&device, cells);
    let mut ha_state = ha.equilibrium_state();
    assert!(newton_solve(&ha, &mut ha_state, &[0.0, 0.0], &nopts).unwrap().converged);
    let (_, rep2) =
        voltage_sweep(&ha, &mut ha_state, &[0.0, 0.0], &sweep, &nopts, &contacts).unwrap();
    assert!(rep2.completed);

    // Compare psi at the shared nodes.
    let mut worst = 0.0f64;
    for (i, &x) in fv.x_um.iter().enumerate() {
        let ha_val = ha.eval_at(&ha_state, [x, 0.0]).unwrap().psi;
        let rel = (ha_val - fv_state.psi[i]).abs() / fv_state.psi[i].abs().max(1.0);
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-6, "max psi relative difference {worst}");
}
