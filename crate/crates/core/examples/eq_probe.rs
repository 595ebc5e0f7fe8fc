use driftdg::device::DeviceSpec;
use driftdg::hdg::HdgSystem;
use driftdg::mesh::{Mesh, SchemeTag};
use driftdg::physics::MaterialParams;
use driftdg::solver::{newton_solve, Discretization, NewtonOptions};

fn main() {
    let device = DeviceSpec::preset("abrupt3").unwrap();
    let prob = device.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
    let mut mesh = Mesh::uniform_1d(0.0, 20.0, 100, &device.contacts).unwrap();
    mesh.assign_schemes(&vec![SchemeTag::Ha; 100]).unwrap();
    let sys = HdgSystem::new(mesh, device.doping.clone(), prob, 2);
    let mut state = sys.equilibrium_state();
    let r = sys.residual_norm(&state, &[0.0, 0.0]).unwrap();
    println!("coupled residual after PB init: {r:.4e}");
    let rep = newton_solve(&sys, &mut state, &[0.0, 0.0], &NewtonOptions::default()).unwrap();
    println!("converged={} iters={} bt={} failure={:?}", rep.converged, rep.iterations, rep.backtrack_total, rep.failure);
    println!("history: {:?}", &rep.residual_history[..rep.residual_history.len().min(12)]);
}
