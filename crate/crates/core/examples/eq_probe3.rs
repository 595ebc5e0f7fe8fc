use driftdg::device::DeviceSpec;
use driftdg::hdg::HdgSystem;
use driftdg::mesh::{Mesh, SchemeTag};
use driftdg::physics::MaterialParams;

fn main() {
    let device = DeviceSpec::preset("abrupt3").unwrap();
    let prob = device.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
    let mut mesh = Mesh::uniform_1d(0.0, 20.0, 4, &device.contacts).unwrap();
    mesh.assign_schemes(&vec![SchemeTag::Ha; 4]).unwrap();
    let sys = HdgSystem::new(mesh, device.doping.clone(), prob, 2);
    let state = sys.equilibrium_state();
    let bias = [0.0, 0.2];
    // Build the dense monolithic matrix via the public oracle path pieces:
    let (_, mat, _rhs) = sys.monolithic_matrix(&state, &bias).unwrap();
    let svd = mat.clone().svd(false, false);
    let sv = svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::MAX, f64::min);
    println!("n={} sigma_max={:.3e} sigma_min={:.3e} cond={:.3e}", mat.nrows(), smax, smin, smax/smin);
    let mut s: Vec<f64> = sv.iter().cloned().collect();
    s.sort_by(|a,b| a.partial_cmp(b).unwrap());
    println!("smallest 6: {:?}", &s[..6]);
}
