use driftdg::device::DeviceSpec;
use driftdg::doping::{DopingPrimitive, DopingProfile};
use driftdg::hdg::HdgSystem;
use driftdg::mesh::{Mesh, SchemeTag};
use driftdg::physics::MaterialParams;
use driftdg::solver::Discretization;

fn main() {
    // Directional FD check of the global Jacobian at the stalling state:
    // residual_norm(x + eps*delta) should match (1-eps)*residual to first order.
    let device = DeviceSpec::preset("abrupt3").unwrap();
    let mut d2 = device.clone();
    d2.n_star_cm3 = 1e15;
    let prob = d2.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
    let mut mesh = Mesh::uniform_1d(0.0, 20.0, 100, &device.contacts).unwrap();
    mesh.assign_schemes(&vec![SchemeTag::Ha; 100]).unwrap();
    let doping = DopingProfile::new(vec![DopingPrimitive::AbruptInterface {
        axis: 0, position_um: 10.0, left_cm3: 1e15, right_cm3: -1e15, midpoint_cm3: 0.0,
    }]);
    let sys = HdgSystem::new(mesh, doping, prob, 2);
    let state = sys.equilibrium_state();
    let bias = vec![0.0, 0.0];
    let (res, delta) = sys.newton_step(&state, &bias).unwrap();
    println!("residual {res:.6e}");
    let mut dmax = 0.0f64;
    for c in 0..sys.n_cells() {
        for v in &delta.cells[c] { dmax = dmax.max(v.abs()); }
    }
    for v in &delta.traces { dmax = dmax.max(v.abs()); }
    println!("|delta|_inf = {dmax:.4e}");
    for eps in [1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4] {
        let mut t = state.clone();
        sys.apply_step(&mut t, &delta, eps);
        let r = sys.residual_norm(&t, &bias).unwrap();
        let predicted = (1.0 - eps) * res;
        println!("eps {eps:.0e}: r={r:.8e} predicted={predicted:.8e} excess={:+.3e}", r - predicted);
    }
}
