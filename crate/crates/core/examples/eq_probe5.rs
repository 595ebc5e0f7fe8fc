use driftdg::device::DeviceSpec;
use driftdg::hdg::{DiscreteState, HdgSystem};
use driftdg::mesh::{Mesh, SchemeTag};
use driftdg::physics::MaterialParams;
use driftdg::solver::Discretization;

fn clip_delta(sys: &HdgSystem, state: &DiscreteState, delta: &DiscreteState, psi_cap: f64, carrier_factor: f64) -> DiscreteState {
    let mut d = delta.clone();
    let nie = sys.prob.n_ie;
    for (c, g) in sys.geoms.iter().enumerate() {
        for i in 0..g.s {
            let ip = g.off_psi() + i;
            d.cells[c][ip] = d.cells[c][ip].clamp(-psi_cap, psi_cap);
            for idx in [g.off_n() + i, g.off_p() + i] {
                let cap = carrier_factor * (state.cells[c][idx].abs() + nie);
                d.cells[c][idx] = d.cells[c][idx].clamp(-cap, cap);
            }
        }
    }
    for (eid, &nodes) in sys.layout.edge_nodes.iter().enumerate() {
        for k in 0..nodes {
            let ip = sys.layout.trace_index(eid, 0, k);
            d.traces[ip] = d.traces[ip].clamp(-psi_cap, psi_cap);
            for var in 1..3 {
                let idx = sys.layout.trace_index(eid, var, k);
                let cap = carrier_factor * (state.traces[idx].abs() + nie);
                d.traces[idx] = d.traces[idx].clamp(-cap, cap);
            }
        }
    }
    d
}

fn main() {
    let device = DeviceSpec::preset("abrupt3").unwrap();
    let prob = device.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
    let mut mesh = Mesh::uniform_1d(0.0, 20.0, 100, &device.contacts).unwrap();
    mesh.assign_schemes(&vec![SchemeTag::Ha; 100]).unwrap();
    let sys = HdgSystem::new(mesh, device.doping.clone(), prob, 2);
    let mut state = sys.equilibrium_state();
    let bias = vec![0.0, 0.0];
    let mut res = sys.residual_norm(&state, &bias).unwrap();
    println!("init residual {res:.4e}");
    for it in 0..40 {
        let (_, delta) = sys.newton_step(&state, &bias).unwrap();
        let clipped = clip_delta(&sys, &state, &delta, 2.0, 2.0);
        let mut alpha = 1.0f64;
        let mut accepted = false;
        for _ in 0..12 {
            let mut trial = state.clone();
            sys.apply_step(&mut trial, &clipped, alpha);
            let tr = sys.residual_norm(&trial, &bias).unwrap();
            if tr.is_finite() && tr < res {
                state = trial;
                res = tr;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        println!("iter {it}: residual {res:.4e} alpha {alpha:.3e} accepted {accepted}");
        if !accepted || res < 1e-10 { break; }
    }
}
