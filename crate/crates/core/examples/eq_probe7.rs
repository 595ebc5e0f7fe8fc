use driftdg::device::DeviceSpec;
use driftdg::doping::{DopingPrimitive, DopingProfile};
use driftdg::hdg::HdgSystem;
use driftdg::mesh::{Mesh, SchemeTag};
use driftdg::physics::MaterialParams;
use driftdg::solver::{newton_solve, NewtonOptions};

fn main() {
    // Fixed scaling from the full device; doping ramped by factor r per step.
    let device = DeviceSpec::preset("abrupt3").unwrap();
    let prob = device.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
    let mut mesh = Mesh::uniform_1d(0.0, 20.0, 100, &device.contacts).unwrap();
    mesh.assign_schemes(&vec![SchemeTag::Ha; 100]).unwrap();
    let full = 1e17f64;
    let r = 4.0f64;
    let theta0 = 20.0 * 1.08738184e10 / full;
    let mut theta = theta0;
    let mut state = None;
    let mut total_iters = 0;
    loop {
        let level = (theta * full).min(full);
        let doping = DopingProfile::new(vec![DopingPrimitive::AbruptInterface {
            axis: 0,
            position_um: 10.0,
            left_cm3: level,
            right_cm3: -level,
            midpoint_cm3: 0.0,
        }]);
        let sys = HdgSystem::new(mesh.clone(), doping, prob.clone(), 2);
        let mut s = state.take().unwrap_or_else(|| sys.equilibrium_state());
        let rep = newton_solve(&sys, &mut s, &[0.0, 0.0], &NewtonOptions::default()).unwrap();
        total_iters += rep.iterations;
        println!("level {level:.3e}: converged={} iters={}", rep.converged, rep.iterations);
        if !rep.converged {
            println!("FAILED");
            break;
        }
        state = Some(s);
        if theta >= 1.0 { println!("DONE, total coupled iterations {total_iters}"); break; }
        theta = (theta * r).min(1.0);
    }
}
