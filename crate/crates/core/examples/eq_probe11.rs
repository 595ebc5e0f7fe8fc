use driftdg::device::DeviceSpec;
use driftdg::doping::{DopingPrimitive, DopingProfile};
use driftdg::hdg::{assemble_cell, compute_tau, HdgSystem};
use driftdg::mesh::{Mesh, SchemeTag};
use driftdg::physics::MaterialParams;
use driftdg::solver::{newton_solve, Discretization, NewtonOptions};

fn classify(sys: &HdgSystem, state: &driftdg::hdg::DiscreteState, bias: &[f64]) {
    let mut worst = (0.0f64, 0usize, 0usize, String::new());
    for c in 0..sys.n_cells() {
        let g = &sys.geoms[c];
        let local = &state.cells[c];
        let trace: Vec<f64> = {
            let mut v = Vec::new();
            for f in &g.faces {
                let off = sys.layout.edge_offset[f.edge];
                v.extend_from_slice(&state.traces[off..off + 3 * f.nodes]);
            }
            v
        };
        let tau = compute_tau(g, &sys.prob, local, &trace);
        let out = assemble_cell(g, &sys.prob, local, &trace, bias, &tau, false);
        for (i, v) in out.res_local.iter().enumerate() {
            if v.abs() > worst.0 {
                let s = g.s; let d = g.dim;
                let kind = if i < d*s {"eq1"} else if i < 2*d*s {"eq2"} else if i < 3*d*s {"eq3"}
                    else if i < 3*d*s+s {"eq4"} else if i < 3*d*s+2*s {"eq5"} else {"eq6"};
                worst = (v.abs(), c, i, kind.into());
            }
        }
        for (i, v) in out.res_trace.iter().enumerate() {
            if v.abs() > worst.0 { worst = (v.abs(), c, i, "trace".into()); }
        }
    }
    let cell = &sys.mesh.cells[worst.1];
    println!("worst residual {:.3e} in {} of cell {} at x=[{:.2},{:.2}]um", worst.0, worst.3, worst.1, cell.lo[0], cell.hi[0]);
}

fn main() {
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
    let mut state = sys.equilibrium_state();
    let bias = vec![0.0, 0.0];
    let mut opts = NewtonOptions::default();
    opts.positivity_cutoff = true;
    let rep = newton_solve(&sys, &mut state, &bias, &opts).unwrap();
    println!("stalled: res history {:?}", &rep.residual_history[rep.residual_history.len().saturating_sub(4)..]);
    classify(&sys, &state, &bias);
    // Landscape along the next direction, with cutoff applied to trials.
    let (res, delta) = sys.newton_step(&state, &bias).unwrap();
    println!("residual {res:.6e}");
    let mut dmax = 0.0f64;
    let mut dloc = (0usize, 0usize);
    for c in 0..sys.n_cells() {
        for (i, v) in delta.cells[c].iter().enumerate() {
            if v.abs() > dmax { dmax = v.abs(); dloc = (c, i); }
        }
    }
    println!("|delta|max = {dmax:.3e} at cell {} idx {}", dloc.0, dloc.1);
    for alpha in [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 1.0/64.0, 1.0/256.0, 1.0/1024.0, 1.0/16384.0] {
        let mut t = state.clone();
        sys.apply_step(&mut t, &delta, alpha);
        sys.clamp_carriers(&mut t);
        let r = sys.residual_norm(&t, &bias).unwrap();
        println!("alpha {alpha:10.3e}: residual {r:.6e}");
    }
}
