use driftdg::device::DeviceSpec;
use driftdg::doping::{DopingPrimitive, DopingProfile};
use driftdg::hdg::{DiscreteState, HdgSystem};
use driftdg::mesh::{Mesh, SchemeTag};
use driftdg::physics::MaterialParams;
use driftdg::solver::Discretization;

// Multiplicative (log-space) carrier update with potential clipping.
fn damped_apply(sys: &HdgSystem, state: &mut DiscreteState, delta: &DiscreteState, psi_cap: f64, log_cap: f64) {
    let nie = sys.prob.n_ie;
    for (c, g) in sys.geoms.iter().enumerate() {
        for i in 0..g.s {
            let ip = g.off_psi() + i;
            state.cells[c][ip] += delta.cells[c][ip].clamp(-psi_cap, psi_cap);
            for idx in [g.off_n() + i, g.off_p() + i] {
                let u = state.cells[c][idx].max(1e-30 * nie);
                let rel = (delta.cells[c][idx] / u).clamp(-log_cap, log_cap);
                state.cells[c][idx] = u * rel.exp();
            }
        }
        for m in 0..g.dim * g.s {
            state.cells[c][g.off_e() + m] += delta.cells[c][g.off_e() + m];
            state.cells[c][g.off_jn() + m] += delta.cells[c][g.off_jn() + m];
            state.cells[c][g.off_jp() + m] += delta.cells[c][g.off_jp() + m];
        }
    }
    for (eid, &nodes) in sys.layout.edge_nodes.iter().enumerate() {
        for k in 0..nodes {
            let ip = sys.layout.trace_index(eid, 0, k);
            state.traces[ip] += delta.traces[ip].clamp(-psi_cap, psi_cap);
            for var in 1..3 {
                let idx = sys.layout.trace_index(eid, var, k);
                let u = state.traces[idx].max(1e-30 * nie);
                let rel = (delta.traces[idx] / u).clamp(-log_cap, log_cap);
                state.traces[idx] = u * rel.exp();
            }
        }
    }
    sys.layout.refresh_slaves(&mut state.traces);
}

fn main() {
    let device = DeviceSpec::preset("abrupt3").unwrap();
    let prob = device.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
    let mut mesh = Mesh::uniform_1d(0.0, 20.0, 100, &device.contacts).unwrap();
    mesh.assign_schemes(&vec![SchemeTag::Ha; 100]).unwrap();
    let doping = DopingProfile::new(vec![DopingPrimitive::AbruptInterface {
        axis: 0, position_um: 10.0, left_cm3: 1e17, right_cm3: -1e17, midpoint_cm3: 0.0,
    }]);
    let sys = HdgSystem::new(mesh.clone(), doping, prob.clone(), 2);
    let mut state = sys.equilibrium_state();
    let bias = vec![0.0, 0.0];
    for it in 0..40 {
        let (res, delta) = sys.newton_step(&state, &bias).unwrap();
        println!("iter {it}: residual {res:.4e}");
        if res < 1e-9 { println!("CONVERGED"); break; }
        damped_apply(&sys, &mut state, &delta, 2.0, 1.0);
    }
}
