use driftdg::device::DeviceSpec;
use driftdg::doping::{DopingPrimitive, DopingProfile};
use driftdg::hdg::HdgSystem;
use driftdg::mesh::{Mesh, SchemeTag};
use driftdg::physics::MaterialParams;
use driftdg::solver::{newton_solve, NewtonOptions};

fn main() {
    // Case-3 geometry but with the doping magnitude swept from mild to full.
    for level in [3e10, 3e11, 3e12, 3e13, 1e15, 1e17] {
        let mut device = DeviceSpec::preset("abrupt3").unwrap();
        device.doping = DopingProfile::new(vec![DopingPrimitive::AbruptInterface {
            axis: 0,
            position_um: 10.0,
            left_cm3: level,
            right_cm3: -level,
            midpoint_cm3: 0.0,
        }]);
        device.n_star_cm3 = level;
        let prob = device.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
        let mut mesh = Mesh::uniform_1d(0.0, 20.0, 100, &device.contacts).unwrap();
        mesh.assign_schemes(&vec![SchemeTag::Ha; 100]).unwrap();
        let sys = HdgSystem::new(mesh, device.doping.clone(), prob.clone(), 2);
        let mut state = sys.equilibrium_state();
        let mut opts = NewtonOptions::default();
        opts.positivity_cutoff = true;
        let rep = newton_solve(&sys, &mut state, &[0.0, 0.0], &opts).unwrap();
        println!(
            "N={level:+.1e} nie_scaled={:.2e} barrier={:.2}: converged={} iters={} res_final={:.2e} {}",
            prob.n_ie,
            (level as f64 / (2.0 * 1.08738184e10)).asinh(),
            rep.converged,
            rep.iterations,
            rep.final_residual(),
            rep.failure.clone().unwrap_or_default()
        );
    }
}
