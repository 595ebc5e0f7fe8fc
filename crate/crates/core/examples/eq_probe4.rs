use driftdg::device::DeviceSpec;
use driftdg::hdg::{assemble_cell, compute_tau, HdgSystem};
use driftdg::mesh::{Mesh, SchemeTag};
use driftdg::physics::MaterialParams;

fn main() {
    let device = DeviceSpec::preset("abrupt3").unwrap();
    let prob = device.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
    let mut mesh = Mesh::uniform_1d(0.0, 20.0, 100, &device.contacts).unwrap();
    mesh.assign_schemes(&vec![SchemeTag::Ha; 100]).unwrap();
    let sys = HdgSystem::new(mesh, device.doping.clone(), prob.clone(), 2);
    let state = sys.equilibrium_state();
    let bias = vec![0.0, 0.0];
    let mut worst = [0.0f64; 6];
    for c in 0..sys.n_cells() {
        let g = &sys.geoms[c];
        let local = &state.cells[c];
        let tr_full: Vec<f64> = {
            let mut v = Vec::new();
            for f in &g.faces {
                let off = sys.layout.edge_offset[f.edge];
                v.extend_from_slice(&state.traces[off..off + 3 * f.nodes]);
            }
            v
        };
        let tau = compute_tau(g, &prob, local, &tr_full);
        let out = assemble_cell(g, &prob, local, &tr_full, &bias, &tau, false);
        let s = g.s;
        let d = g.dim;
        for i in 0..d * s {
            worst[0] = worst[0].max(out.res_local[i].abs());          // eq1
            worst[1] = worst[1].max(out.res_local[d * s + i].abs());  // eq2
            worst[2] = worst[2].max(out.res_local[2 * d * s + i].abs()); // eq3
        }
        for i in 0..s {
            worst[3] = worst[3].max(out.res_local[g.off_psi() + i].abs()); // eq4
            worst[4] = worst[4].max(out.res_local[g.off_n() + i].abs());   // eq5
            worst[5] = worst[5].max(out.res_local[g.off_p() + i].abs());   // eq6
        }
    }
    println!("eq1(E)={:.2e} eq2(Jn)={:.2e} eq3(Jp)={:.2e} eq4(psi)={:.2e} eq5(n)={:.2e} eq6(p)={:.2e}", worst[0], worst[1], worst[2], worst[3], worst[4], worst[5]);
    let samp = sys.eval_at(&state, [15.0, 0.0]).unwrap();
    println!("at 15um: n={:.3e} p={:.3e} jn={:.3e}", samp.n, samp.p, samp.jn[0]);
}
