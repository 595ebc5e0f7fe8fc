//! 1D finite-volume Scharfetter-Gummel backend: nodal unknowns, Bernoulli
//! face fluxes, analytic Jacobian, shared Newton driver.

use crate::bernoulli::bernoulli_with_derivative;
use crate::device::DeviceSpec;
use crate::doping::DopingProfile;
use crate::error::{ConfigError, SolveError};
use crate::physics::{equilibrium_potential, ohmic_contact_values, ScaledProblem};
use crate::solver::{Discretization, SkeletonSolver};
use std::sync::Mutex;

/// Nodal state on the 1D grid.
#[derive(Debug, Clone)]
pub struct FvState {
    pub psi: Vec<f64>,
    pub n: Vec<f64>,
    pub p: Vec<f64>,
}

/// Electron and hole Scharfetter-Gummel fluxes through one face, with the
/// analytic derivatives used by the Jacobian.
#[derive(Debug, Clone, Copy)]
struct FaceFlux {
    jn: f64,
    jp: f64,
    djn_dpsi_r: f64, // d jn / d psi_{i+1}; d/d psi_i is the negative
    djn_dn_l: f64,
    djn_dn_r: f64,
    djp_dpsi_r: f64,
    djp_dp_l: f64,
    djp_dp_r: f64,
}

pub struct FvsgSystem {
    pub prob: ScaledProblem,
    /// Node coordinates, scaled.
    pub x: Vec<f64>,
    pub x_um: Vec<f64>,
    /// Scaled net doping at the nodes.
    pub doping: Vec<f64>,
    /// Contact ids at the left and right ends.
    pub end_contacts: [usize; 2],
    pub n_contacts: usize,
    solver: Mutex<SkeletonSolver>,
}

impl FvsgSystem {
    /// Uniform grid over a 1D device.
    pub fn from_device(
        device: &DeviceSpec,
        prob: ScaledProblem,
        n_cells: usize,
    ) -> Result<Self, ConfigError> {
        if device.dim != 1 {
            return Err(ConfigError::Invalid {
                path: "backend.fvsg".into(),
                message: "the fvsg backend is 1D only".into(),
            });
        }
        if n_cells < 2 {
            return Err(ConfigError::Invalid {
                path: "cells".into(),
                message: format!("fvsg needs at least 2 cells, got {n_cells}"),
            });
        }
        let (lo, hi) = (device.lo_um[0], device.hi_um[0]);
        let x_um: Vec<f64> = (0..=n_cells)
            .map(|i| lo + (hi - lo) * i as f64 / n_cells as f64)
            .collect();
        Self::on_grid(&device.doping, device, prob, x_um)
    }

    /// Arbitrary (sorted, positive-spacing) grid in um.
    pub fn on_grid(
        doping: &DopingProfile,
        device: &DeviceSpec,
        prob: ScaledProblem,
        x_um: Vec<f64>,
    ) -> Result<Self, ConfigError> {
        let x_star_um = prob.bases.x_star_um();
        let n_star = prob.bases.n_star;
        let x: Vec<f64> = x_um.iter().map(|v| v / x_star_um).collect();
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ConfigError::DegenerateDomain("non-increasing grid".into()));
        }
        let dop: Vec<f64> = x_um.iter().map(|&v| doping.eval([v, 0.0]) / n_star).collect();
        let mut end_contacts = [usize::MAX, usize::MAX];
        for contact in &device.contacts {
            for seg in &contact.segments {
                if (seg.at_um - x_um[0]).abs() < 1e-9 {
                    end_contacts[0] = contact.id;
                }
                if (seg.at_um - x_um[x_um.len() - 1]).abs() < 1e-9 {
                    end_contacts[1] = contact.id;
                }
            }
        }
        if end_contacts.iter().any(|&c| c == usize::MAX) {
            return Err(ConfigError::Invalid {
                path: "contacts".into(),
                message: "1D device needs Dirichlet contacts at both ends".into(),
            });
        }
        Ok(Self {
            prob,
            x,
            x_um,
            doping: dop,
            end_contacts,
            n_contacts: device.contacts.len(),
            solver: Mutex::new(SkeletonSolver::new()),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.x.len()
    }

    /// Equilibrium initial state: charge-neutral asinh guess refined by a
    /// nodal nonlinear Poisson-Boltzmann solve (carriers eliminated via the
    /// Boltzmann relation), then carriers restored from the potential.
    ///
    /// The coupled Newton stalls when started from the raw neutral guess:
    /// the carrier equations begin at zero residual and any potential move
    /// excites them quadratically, so the line search cannot make progress.
    pub fn equilibrium_state(&self) -> FvState {
        let nie = self.prob.n_ie;
        let mut psi: Vec<f64> = self
            .doping
            .iter()
            .map(|&nd| equilibrium_potential(nd, nie))
            .collect();
        self.poisson_boltzmann(&mut psi);
        let n = psi.iter().map(|&s| nie * (s / self.prob.v_n).exp()).collect();
        let p = psi.iter().map(|&s| nie * (-s / self.prob.v_p).exp()).collect();
        FvState { psi, n, p }
    }

    /// Damped Newton on the equilibrium Poisson equation with Boltzmann
    /// carrier substitution; best effort (the coupled solve verifies).
    fn poisson_boltzmann(&self, psi: &mut [f64]) {
        let nn = self.n_nodes();
        let nie = self.prob.n_ie;
        let lam2 = self.prob.lambda_sq;
        let exp_c = |x: f64| x.min(690.0).exp();
        let residual = |psi: &[f64]| -> Vec<f64> {
            let mut r = vec![0.0; nn];
            let (g0, _, _) = ohmic_contact_values(self.doping[0], nie, 0.0);
            let (g1, _, _) = ohmic_contact_values(self.doping[nn - 1], nie, 0.0);
            r[0] = psi[0] - g0;
            r[nn - 1] = psi[nn - 1] - g1;
            for i in 1..nn - 1 {
                let hl = self.x[i] - self.x[i - 1];
                let hr = self.x[i + 1] - self.x[i];
                let cv = 0.5 * (hl + hr);
                let n = nie * exp_c(psi[i] / self.prob.v_n);
                let p = nie * exp_c(-psi[i] / self.prob.v_p);
                r[i] = lam2 * ((psi[i + 1] - psi[i]) / hr - (psi[i] - psi[i - 1]) / hl)
                    + cv * (p - n + self.doping[i]);
            }
            r
        };
        let norm = |r: &[f64]| r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut solver = SkeletonSolver::new();
        let mut res = residual(psi);
        for _ in 0..80 {
            let rn = norm(&res);
            if rn <= 1e-11 {
                break;
            }
            let mut tri = Vec::new();
            tri.push((0, 0, 1.0));
            tri.push((nn - 1, nn - 1, 1.0));
            for i in 1..nn - 1 {
                let hl = self.x[i] - self.x[i - 1];
                let hr = self.x[i + 1] - self.x[i];
                let cv = 0.5 * (hl + hr);
                let n = nie * exp_c(psi[i] / self.prob.v_n);
                let p = nie * exp_c(-psi[i] / self.prob.v_p);
                tri.push((i, i - 1, lam2 / hl));
                tri.push((i, i + 1, lam2 / hr));
                tri.push((
                    i,
                    i,
                    -lam2 * (1.0 / hl + 1.0 / hr) - cv * (n / self.prob.v_n + p / self.prob.v_p),
                ));
            }
            let rhs: Vec<f64> = res.iter().map(|v| -v).collect();
            let Ok(delta) = solver.solve(nn, &tri, &rhs) else {
                break;
            };
            // Backtracking on the Poisson residual alone.
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let trial: Vec<f64> = psi
                    .iter()
                    .zip(&delta)
                    .map(|(a, d)| a + alpha * d)
                    .collect();
                let tr = residual(&trial);
                if norm(&tr).is_finite() && norm(&tr) < rn {
                    psi.copy_from_slice(&trial);
                    res = tr;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
    }

    fn face_flux(&self, s: &FvState, i: usize) -> FaceFlux {
        let h = self.x[i + 1] - self.x[i];
        let dpsi = s.psi[i + 1] - s.psi[i];
        let (bn_p, dbn_p) = bernoulli_with_derivative(dpsi / self.prob.v_n);
        let (bn_m, dbn_m) = bernoulli_with_derivative(-dpsi / self.prob.v_n);
        let (bp_p, dbp_p) = bernoulli_with_derivative(dpsi / self.prob.v_p);
        let (bp_m, dbp_m) = bernoulli_with_derivative(-dpsi / self.prob.v_p);
        let cn = self.prob.d_n / h;
        let cp = self.prob.d_p / h;
        FaceFlux {
            jn: cn * (bn_p * s.n[i + 1] - bn_m * s.n[i]),
            jp: cp * (bp_p * s.p[i] - bp_m * s.p[i + 1]),
            djn_dpsi_r: cn / self.prob.v_n * (dbn_p * s.n[i + 1] + dbn_m * s.n[i]),
            djn_dn_l: -cn * bn_m,
            djn_dn_r: cn * bn_p,
            djp_dpsi_r: cp / self.prob.v_p * (dbp_p * s.p[i] + dbp_m * s.p[i + 1]),
            djp_dp_l: cp * bp_p,
            djp_dp_r: -cp * bp_m,
        }
    }

    fn boundary_values(&self, end: usize, bias: &[f64]) -> (f64, f64, f64) {
        let node = if end == 0 { 0 } else { self.n_nodes() - 1 };
        ohmic_contact_values(
            self.doping[node],
            self.prob.n_ie,
            bias[self.end_contacts[end]],
        )
    }

    /// Residual and, optionally, Jacobian triplets of the nodal system.
    pub fn assemble(
        &self,
        s: &FvState,
        bias: &[f64],
        with_jacobian: bool,
    ) -> (Vec<f64>, Option<Vec<(usize, usize, f64)>>) {
        let nn = self.n_nodes();
        let lam2 = self.prob.lambda_sq;
        let mut res = vec![0.0; 3 * nn];
        let mut tri = with_jacobian.then(Vec::new);
        let fluxes: Vec<FaceFlux> = (0..nn - 1).map(|i| self.face_flux(s, i)).collect();

        for end in 0..2 {
            let node = if end == 0 { 0 } else { nn - 1 };
            let (g_psi, g_n, g_p) = self.boundary_values(end, bias);
            res[3 * node] = s.psi[node] - g_psi;
            res[3 * node + 1] = s.n[node] - g_n;
            res[3 * node + 2] = s.p[node] - g_p;
            if let Some(t) = tri.as_mut() {
                t.push((3 * node, 3 * node, 1.0));
                t.push((3 * node + 1, 3 * node + 1, 1.0));
                t.push((3 * node + 2, 3 * node + 2, 1.0));
            }
        }

        for i in 1..nn - 1 {
            let hl = self.x[i] - self.x[i - 1];
            let hr = self.x[i + 1] - self.x[i];
            let cv = 0.5 * (hl + hr);
            let rec = self.prob.recombination(s.n[i], s.p[i]);
            let fl = &fluxes[i - 1];
            let fr = &fluxes[i];

            res[3 * i] = lam2 * ((s.psi[i + 1] - s.psi[i]) / hr - (s.psi[i] - s.psi[i - 1]) / hl)
                + cv * (s.p[i] - s.n[i] + self.doping[i]);
            res[3 * i + 1] = -(fr.jn - fl.jn) + cv * rec.r;
            res[3 * i + 2] = (fr.jp - fl.jp) + cv * rec.r;

            if let Some(t) = tri.as_mut() {
                let (rp, rn, rpp) = (3 * i, 3 * i + 1, 3 * i + 2);
                // Poisson row.
                t.push((rp, 3 * (i - 1), lam2 / hl));
                t.push((rp, 3 * i, -lam2 * (1.0 / hl + 1.0 / hr)));
                t.push((rp, 3 * (i + 1), lam2 / hr));
                t.push((rp, 3 * i + 1, -cv));
                t.push((rp, 3 * i + 2, cv));
                // Electron row: -(fr - fl) + cv R. The face derivative is
                // taken w.r.t. its right node; the left node carries the
                // opposite sign.
                t.push((rn, 3 * (i + 1), -fr.djn_dpsi_r));
                t.push((rn, 3 * i, fr.djn_dpsi_r + fl.djn_dpsi_r));
                t.push((rn, 3 * (i - 1), -fl.djn_dpsi_r));
                t.push((rn, 3 * (i + 1) + 1, -fr.djn_dn_r));
                t.push((rn, 3 * i + 1, -fr.djn_dn_l + fl.djn_dn_r + cv * rec.dr_dn));
                t.push((rn, 3 * (i - 1) + 1, fl.djn_dn_l));
                t.push((rn, 3 * i + 2, cv * rec.dr_dp));
                // Hole row: +(fr - fl) + cv R.
                t.push((rpp, 3 * (i + 1), fr.djp_dpsi_r));
                t.push((rpp, 3 * i, -fr.djp_dpsi_r - fl.djp_dpsi_r));
                t.push((rpp, 3 * (i - 1), fl.djp_dpsi_r));
                t.push((rpp, 3 * (i + 1) + 2, fr.djp_dp_r));
                t.push((rpp, 3 * i + 2, fr.djp_dp_l - fl.djp_dp_r + cv * rec.dr_dp));
                t.push((rpp, 3 * (i - 1) + 2, -fl.djp_dp_l));
                t.push((rpp, 3 * i + 1, cv * rec.dr_dn));
            }
        }
        (res, tri)
    }

    /// Max deviation of carrier control-volume balances (flux difference vs
    /// recombination integral) at the current state.
    pub fn conservation_defect(&self, s: &FvState, bias: &[f64]) -> f64 {
        let (res, _) = self.assemble(s, bias, false);
        let nn = self.n_nodes();
        let mut worst = 0.0f64;
        for i in 1..nn - 1 {
            worst = worst.max(res[3 * i + 1].abs()).max(res[3 * i + 2].abs());
        }
        worst
    }

    /// Piecewise-linear sample of the nodal fields at `x_um`.
    pub fn eval_at(&self, s: &FvState, x_um: f64) -> Option<FvSample> {
        let last = self.x_um.len() - 1;
        if x_um < self.x_um[0] - 1e-9 || x_um > self.x_um[last] + 1e-9 {
            return None;
        }
        let i = match self
            .x_um
            .binary_search_by(|v| v.partial_cmp(&x_um).unwrap())
        {
            Ok(i) => i.min(last - 1),
            Err(i) => i.saturating_sub(1).min(last - 1),
        };
        let h_um = self.x_um[i + 1] - self.x_um[i];
        let t = ((x_um - self.x_um[i]) / h_um).clamp(0.0, 1.0);
        let lerp = |a: f64, b: f64| a + t * (b - a);
        let h = self.x[i + 1] - self.x[i];
        Some(FvSample {
            psi: lerp(s.psi[i], s.psi[i + 1]),
            n: lerp(s.n[i], s.n[i + 1]),
            p: lerp(s.p[i], s.p[i + 1]),
            e: -(s.psi[i + 1] - s.psi[i]) / h,
            jn: self.face_flux(s, i).jn,
            jp: self.face_flux(s, i).jp,
        })
    }

    pub fn psi_range(&self, s: &FvState) -> (f64, f64) {
        s.psi
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FvSample {
    pub psi: f64,
    pub n: f64,
    pub p: f64,
    pub e: f64,
    pub jn: f64,
    pub jp: f64,
}

impl Discretization for FvsgSystem {
    type State = FvState;

    fn residual_norm(&self, state: &Self::State, bias: &[f64]) -> Result<f64, SolveError> {
        let (res, _) = self.assemble(state, bias, false);
        Ok(res.iter().fold(0.0f64, |acc, v| acc.max(v.abs())))
    }

    fn newton_step(
        &self,
        state: &Self::State,
        bias: &[f64],
    ) -> Result<(f64, Self::State), SolveError> {
        let (res, tri) = self.assemble(state, bias, true);
        let norm = res.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let rhs: Vec<f64> = res.iter().map(|v| -v).collect();
        let delta = self
            .solver
            .lock()
            .unwrap()
            .solve(3 * self.n_nodes(), &tri.unwrap(), &rhs)?;
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite("fvsg linear solve"));
        }
        let nn = self.n_nodes();
        let mut d = FvState {
            psi: vec![0.0; nn],
            n: vec![0.0; nn],
            p: vec![0.0; nn],
        };
        for i in 0..nn {
            d.psi[i] = delta[3 * i];
            d.n[i] = delta[3 * i + 1];
            d.p[i] = delta[3 * i + 2];
        }
        Ok((norm, d))
    }

    fn apply_step(&self, state: &mut Self::State, delta: &Self::State, alpha: f64) {
        for i in 0..state.psi.len() {
            state.psi[i] += alpha * delta.psi[i];
            state.n[i] += alpha * delta.n[i];
            state.p[i] += alpha * delta.p[i];
        }
    }

    fn max_rel_step(
        &self,
        state: &Self::State,
        delta: &Self::State,
        alpha: f64,
        eps_abs_psi: f64,
    ) -> f64 {
        let eps_c = self.prob.n_ie;
        let mut worst = 0.0f64;
        for i in 0..state.psi.len() {
            worst = worst.max((alpha * delta.psi[i]).abs() / (state.psi[i].abs() + eps_abs_psi));
            worst = worst.max((alpha * delta.n[i]).abs() / (state.n[i].abs() + eps_c));
            worst = worst.max((alpha * delta.p[i]).abs() / (state.p[i].abs() + eps_c));
        }
        worst
    }

    fn clamp_carriers(&self, state: &mut Self::State) {
        for v in state.n.iter_mut().chain(state.p.iter_mut()) {
            *v = v.max(0.0);
        }
    }

    fn carrier_abs_floor(&self) -> f64 {
        self.prob.n_ie
    }

    fn contact_flux_integrals(&self, state: &Self::State) -> Vec<f64> {
        let nn = self.n_nodes();
        let left = self.face_flux(state, 0);
        let right = self.face_flux(state, nn - 2);
        let mut out = vec![0.0; self.n_contacts];
        // Outward normal is -1 at the left contact, +1 at the right.
        out[self.end_contacts[0]] += -(left.jn + left.jp);
        out[self.end_contacts[1]] += right.jn + right.jp;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceSpec;
    use crate::physics::MaterialParams;
    use rand::{Rng, SeedableRng};

    fn system(cells: usize) -> FvsgSystem {
        let device = DeviceSpec::preset("abrupt3").unwrap();
        let prob = device.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
        FvsgSystem::from_device(&device, prob, cells).unwrap()
    }

    #[test]
    fn zero_drift_is_central_diffusion() {
        let sys = system(4);
        let mut s = sys.equilibrium_state();
        // Flatten psi: face flux must reduce to D (u_{i+1} - u_i)/h.
        for v in s.psi.iter_mut() {
            *v = 0.3;
        }
        s.n = vec![1.0, 2.0, 5.0, 3.0, 1.5];
        s.p = vec![0.5, 0.25, 1.0, 2.0, 0.75];
        let f = sys.face_flux(&s, 1);
        let h = sys.x[2] - sys.x[1];
        assert!((f.jn - sys.prob.d_n / h * (s.n[2] - s.n[1])).abs() < 1e-12 * f.jn.abs());
        assert!((f.jp - sys.prob.d_p / h * (s.p[1] - s.p[2])).abs() < 1e-12 * f.jp.abs().max(1.0));
    }

    #[test]
    fn boltzmann_state_has_zero_fluxes() {
        let sys = system(8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let nie = sys.prob.n_ie;
        let mut s = sys.equilibrium_state();
        for i in 0..sys.n_nodes() {
            s.psi[i] = rng.gen_range(-30.0..30.0);
            s.n[i] = nie * (s.psi[i] / sys.prob.v_n).exp();
            s.p[i] = nie * (-s.psi[i] / sys.prob.v_p).exp();
        }
        for i in 0..sys.n_nodes() - 1 {
            let f = sys.face_flux(&s, i);
            let scale = (sys.prob.d_n / (sys.x[i + 1] - sys.x[i]))
                * s.n[i].max(s.n[i + 1]).max(1e-300);
            assert!(f.jn.abs() <= 1e-12 * scale, "face {i}: {}", f.jn);
            let scale_p = (sys.prob.d_p / (sys.x[i + 1] - sys.x[i]))
                * s.p[i].max(s.p[i + 1]).max(1e-300);
            assert!(f.jp.abs() <= 1e-12 * scale_p, "face {i}: {}", f.jp);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let sys = system(6);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let nn = sys.n_nodes();
        let mut s = sys.equilibrium_state();
        for i in 0..nn {
            s.psi[i] += rng.gen_range(-0.5..0.5);
            s.n[i] = rng.gen_range(0.01..1.0);
            s.p[i] = rng.gen_range(0.01..1.0);
        }
        let bias = vec![0.0, 0.1];
        let (_, tri) = sys.assemble(&s, &bias, true);
        let tri = tri.unwrap();
        let mut jac = vec![vec![0.0; 3 * nn]; 3 * nn];
        for (r, c, v) in tri {
            jac[r][c] += v;
        }
        let h = 4e-6;
        for col in 0..3 * nn {
            let perturb = |s: &FvState, sign: f64| {
                let mut t = s.clone();
                match col % 3 {
                    0 => t.psi[col / 3] += sign * h,
                    1 => t.n[col / 3] += sign * h,
                    _ => t.p[col / 3] += sign * h,
                }
                t
            };
            let (rp, _) = sys.assemble(&perturb(&s, 1.0), &bias, false);
            let (rm, _) = sys.assemble(&perturb(&s, -1.0), &bias, false);
            let fd_col: Vec<f64> = (0..3 * nn).map(|r| (rp[r] - rm[r]) / (2.0 * h)).collect();
            // Column-relative comparison: differences cannot resolve entries
            // far below the column's dominant magnitude.
            let mut colmax = 1e-30f64;
            for row in 0..3 * nn {
                colmax = colmax.max(fd_col[row].abs()).max(jac[row][col].abs());
            }
            for row in 0..3 * nn {
                let (an, fd) = (jac[row][col], fd_col[row]);
                assert!(
                    (an - fd).abs() <= 1e-6 * an.abs().max(fd.abs()).max(colmax),
                    "J[{row},{col}]: {an} vs {fd}"
                );
            }
        }
    }
}
