use driftdg::device::DeviceSpec;
use driftdg::doping::{DopingPrimitive, DopingProfile};
use driftdg::hdg::{DiscreteState, HdgSystem};
use driftdg::mesh::{Mesh, SchemeTag};
use driftdg::physics::MaterialParams;
use driftdg::solver::Discretization;

// state + alpha*delta, but carriers move multiplicatively: u*exp(alpha*du/u).
fn apply_mult(sys: &HdgSystem, state: &DiscreteState, delta: &DiscreteState, alpha: f64) -> DiscreteState {
    let mut out = state.clone();
    let nie = sys.prob.n_ie;
    let floor = 1e-25 * nie;
    for (c, g) in sys.geoms.iter().enumerate() {
        for idx in (0..3 * g.dim * g.s).chain(g.off_psi()..g.off_psi() + g.s) {
            out.cells[c][idx] += alpha * delta.cells[c][idx];
        }
        for i in 0..g.s {
            for idx in [g.off_n() + i, g.off_p() + i] {
                let u = state.cells[c][idx];
                if u > floor {
                    out.cells[c][idx] = u * (alpha * delta.cells[c][idx] / u).exp();
                } else {
                    out.cells[c][idx] = u + alpha * delta.cells[c][idx];
                }
            }
        }
    }
    for (eid, &nodes) in sys.layout.edge_nodes.iter().enumerate() {
        for k in 0..nodes {
            let ip = sys.layout.trace_index(eid, 0, k);
            out.traces[ip] = state.traces[ip] + alpha * delta.traces[ip];
            for var in 1..3 {
                let idx = sys.layout.trace_index(eid, var, k);
                let u = state.traces[idx];
                if u > floor {
                    out.traces[idx] = u * (alpha * delta.traces[idx] / u).exp();
                } else {
                    out.traces[idx] = u + alpha * delta.traces[idx];
                }
            }
        }
    }
    sys.layout.refresh_slaves(&mut out.traces);
    out
}

fn main() {
    let device = DeviceSpec::preset("abrupt3").unwrap();
    let prob = device.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
    let mut mesh = Mesh::uniform_1d(0.0, 20.0, 100, &device.contacts).unwrap();
    mesh.assign_schemes(&vec![SchemeTag::Ha; 100]).unwrap();
    for level in [1e15f64, 1e17, 1e19, 1e21] {
        let doping = DopingProfile::new(vec![DopingPrimitive::AbruptInterface {
            axis: 0, position_um: 10.0, left_cm3: level, right_cm3: -level, midpoint_cm3: 0.0,
        }]);
        let prob_l = {
            let mut d2 = device.clone();
            d2.n_star_cm3 = level;
            d2.scaled_problem(&MaterialParams::silicon_300k()).unwrap()
        };
        let sys = HdgSystem::new(mesh.clone(), doping, prob_l, 2);
        let mut state = sys.equilibrium_state();
        let bias = vec![0.0, 0.0];
        let mut res = sys.residual_norm(&state, &bias).unwrap();
        let mut it = 0;
        let mut converged = false;
        while it < 60 {
            it += 1;
            let (_, delta) = sys.newton_step(&state, &bias).unwrap();
            let mut alpha = 1.0f64;
            let mut ok = false;
            for _ in 0..25 {
                let trial = apply_mult(&sys, &state, &delta, alpha);
                let tr = sys.residual_norm(&trial, &bias).unwrap();
                if tr.is_finite() && tr < res {
                    state = trial;
                    res = tr;
                    ok = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !ok { break; }
            if res <= 1e-9 { converged = true; break; }
        }
        println!("level {level:.0e}: converged={converged} iters={it} residual={res:.3e}");
    }
}
