use driftdg::device::DeviceSpec;
use driftdg::hdg::HdgSystem;
use driftdg::mesh::{Mesh, SchemeTag};
use driftdg::physics::MaterialParams;
use driftdg::solver::Discretization;

fn main() {
    let device = DeviceSpec::preset("abrupt3").unwrap();
    let prob = device.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
    let mut mesh = Mesh::uniform_1d(0.0, 20.0, 100, &device.contacts).unwrap();
    mesh.assign_schemes(&vec![SchemeTag::Ha; 100]).unwrap();
    let sys = HdgSystem::new(mesh, device.doping.clone(), prob, 2);
    let state = sys.equilibrium_state();
    let bias = [0.0, 0.0];
    let (r0, delta) = sys.newton_step(&state, &bias).unwrap();
    println!("residual at init: {r0:.4e}");
    for alpha in [1.0, 0.25, 0.0625, 1e-2, 1e-3, 1e-4] {
        let mut t = state.clone();
        sys.apply_step(&mut t, &delta, alpha);
        let r = sys.residual_norm(&t, &bias).unwrap();
        println!("alpha {alpha:8.1e}: residual {r:.6e}");
    }
    // Which cells have the largest local residual at init?
    for c in [48usize, 49, 50, 51] {
        let g = &sys.geoms[c];
        println!("cell {c}: psi coeffs {:?} n {:?}", &state.cells[c][g.off_psi()..g.off_psi()+2], &state.cells[c][g.off_n()..g.off_n()+2]);
        println!("   delta psi {:?} delta n {:?}", &delta.cells[c][g.off_psi()..g.off_psi()+2], &delta.cells[c][g.off_n()..g.off_n()+2]);
    }
}
