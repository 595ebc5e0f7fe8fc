//! Cell-local residual and Jacobian assembly for the nine-field HDG system.
//!
//! Unknown layout per cell: [E | J_n | J_p | psi | n | p] with vector fields
//! stored component-major. Trace layout per face: [psi-hat | n-hat | p-hat]
//! nodal blocks in the cell's face order. The returned matrices are the
//! exact partials of the residual, except that the stabilization parameters
//! tau_n, tau_p are held fixed at the evaluation state (quasi-Newton).

use super::geom::{CellGeom, FaceKind};
use crate::bernoulli::bernoulli_with_derivative;
use crate::physics::{ohmic_contact_values, ScaledProblem};
use crate::mesh::SchemeTag;
use nalgebra::{DMatrix, DVector};

/// Stabilization of the Poisson flux.
pub const TAU_PSI: f64 = 1.0;

/// Convection-diffusion stabilization for one face point: tau = mu |E-hat| +
/// D / diameter, for electrons and holes.
pub fn stabilization_taus(e_hat_norm: f64, diameter: f64, prob: &ScaledProblem) -> (f64, f64, f64) {
    (
        TAU_PSI,
        prob.mu_n * e_hat_norm + prob.d_n / diameter,
        prob.mu_p * e_hat_norm + prob.d_p / diameter,
    )
}

/// Stabilization parameters per face quadrature point, evaluated from the
/// current iterate and then frozen for the Jacobian.
#[derive(Debug, Clone)]
pub struct TauTable {
    /// `[face][q] = (tau_n, tau_p)`.
    pub per_face: Vec<Vec<(f64, f64)>>,
}

/// Evaluates |E-hat| pointwise on each face and forms the tau table.
pub fn compute_tau(geom: &CellGeom, prob: &ScaledProblem, local: &[f64], trace: &[f64]) -> TauTable {
    let s = geom.s;
    let off_e = geom.off_e();
    let off_psi = geom.off_psi();
    let per_face = geom
        .faces
        .iter()
        .map(|face| {
            (0..face.qw.len())
                .map(|q| {
                    let mut e = [0.0, 0.0];
                    let mut psi = 0.0;
                    for i in 0..s {
                        let v = face.cval[q][i];
                        psi += local[off_psi + i] * v;
                        for m in 0..geom.dim {
                            e[m] += local[off_e + m * s + i] * v;
                        }
                    }
                    let mut psih = 0.0;
                    for k in 0..face.nodes {
                        psih += trace[face.trace_offset + k] * face.tval[q][k];
                    }
                    let jump = TAU_PSI * (psi - psih);
                    let mut norm2 = 0.0;
                    for m in 0..geom.dim {
                        let c = e[m] + jump * face.normal[m];
                        norm2 += c * c;
                    }
                    let (_, tn, tp) = stabilization_taus(norm2.sqrt(), geom.diameter, prob);
                    (tn, tp)
                })
                .collect()
        })
        .collect();
    TauTable { per_face }
}

#[derive(Debug, Clone)]
pub struct CellJacobian {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct CellAssembly {
    /// Residual of the six cell equations (zero at a solution).
    pub res_local: DVector<f64>,
    /// This cell's contribution to its edges' trace-equation residuals.
    pub res_trace: DVector<f64>,
    pub jac: Option<CellJacobian>,
    /// Number of quadrature points where recombination hit the denominator
    /// clamp (unphysical iterate diagnostics).
    pub clamped: usize,
}

/// Assembles the residual (and optionally the Jacobian blocks) of one cell
/// with the stabilization parameters frozen at `tau` (quasi-Newton blocks;
/// used by the finite-difference oracles).
pub fn assemble_cell(
    geom: &CellGeom,
    prob: &ScaledProblem,
    local: &[f64],
    trace: &[f64],
    bias: &[f64],
    tau: &TauTable,
    with_jacobian: bool,
) -> CellAssembly {
    assemble_cell_opts(geom, prob, local, trace, bias, tau, with_jacobian, false)
}

/// Full assembly. With `tau_derivatives` the Jacobian carries the exact
/// chain rule of tau_n, tau_p through |E-hat|; without it tau is treated as
/// frozen. The frozen model loses up to tens of percent of the directional
/// derivative near unresolved junctions and can hand the line search an
/// ascent direction, so production Newton keeps the derivatives on.
#[allow(clippy::too_many_arguments)]
pub fn assemble_cell_opts(
    geom: &CellGeom,
    prob: &ScaledProblem,
    local: &[f64],
    trace: &[f64],
    bias: &[f64],
    tau: &TauTable,
    with_jacobian: bool,
    tau_derivatives: bool,
) -> CellAssembly {
    let s = geom.s;
    let d = geom.dim;
    let nloc = geom.nloc;
    let ntr = geom.ntr;
    let (off_e, off_jn, off_jp) = (geom.off_e(), geom.off_jn(), geom.off_jp());
    let (off_psi, off_n, off_p) = (geom.off_psi(), geom.off_n(), geom.off_p());
    let lam2 = prob.lambda_sq;
    let ha = matches!(geom.scheme, SchemeTag::Ha);

    let mut res = DVector::<f64>::zeros(nloc);
    let mut rtr = DVector::<f64>::zeros(ntr);
    let mut a = with_jacobian.then(|| DMatrix::<f64>::zeros(nloc, nloc));
    let mut b = with_jacobian.then(|| DMatrix::<f64>::zeros(nloc, ntr));
    let mut c = with_jacobian.then(|| DMatrix::<f64>::zeros(ntr, nloc));
    let mut dmat = with_jacobian.then(|| DMatrix::<f64>::zeros(ntr, ntr));
    let mut clamped = 0;

    // Volume terms.
    for q in 0..geom.qw.len() {
        let w = geom.qw[q];
        let val = &geom.qval[q];
        let grad = &geom.qgrad[q];
        let mut psi_q = 0.0;
        let mut n_q = 0.0;
        let mut p_q = 0.0;
        let mut e_q = [0.0, 0.0];
        let mut jn_q = [0.0, 0.0];
        let mut jp_q = [0.0, 0.0];
        for i in 0..s {
            let v = val[i];
            psi_q += local[off_psi + i] * v;
            n_q += local[off_n + i] * v;
            p_q += local[off_p + i] * v;
            for m in 0..d {
                e_q[m] += local[off_e + m * s + i] * v;
                jn_q[m] += local[off_jn + m * s + i] * v;
                jp_q[m] += local[off_jp + m * s + i] * v;
            }
        }
        let rec = prob.recombination(n_q, p_q);
        clamped += rec.clamped as usize;
        let nd = geom.qdop[q];

        for i in 0..s {
            let v = val[i];
            let g = grad[i];
            let ge = g[0] * e_q[0] + g[1] * e_q[1];
            let gjn = g[0] * jn_q[0] + g[1] * jn_q[1];
            let gjp = g[0] * jp_q[0] + g[1] * jp_q[1];
            res[off_psi + i] += w * (-lam2 * ge + v * (n_q - p_q - nd));
            res[off_n + i] += w * (gjn + v * rec.r);
            res[off_p + i] += w * (-gjp + v * rec.r);
            for m in 0..d {
                res[off_e + m * s + i] += w * (v * e_q[m] - g[m] * psi_q);
                if ha {
                    res[off_jn + m * s + i] += w * v * jn_q[m];
                    res[off_jp + m * s + i] += w * v * jp_q[m];
                } else {
                    res[off_jn + m * s + i] +=
                        w * (v * jn_q[m] - prob.mu_n * v * n_q * e_q[m] + prob.d_n * g[m] * n_q);
                    res[off_jp + m * s + i] +=
                        w * (v * jp_q[m] - prob.mu_p * v * p_q * e_q[m] - prob.d_p * g[m] * p_q);
                }
            }
        }

        if let Some(a) = a.as_mut() {
            for i in 0..s {
                let vi = val[i];
                let gi = grad[i];
                for j in 0..s {
                    let vj = val[j];
                    let gj = grad[j];
                    let mass = w * vi * vj;
                    a[(off_psi + i, off_n + j)] += mass;
                    a[(off_psi + i, off_p + j)] -= mass;
                    a[(off_n + i, off_n + j)] += mass * rec.dr_dn;
                    a[(off_n + i, off_p + j)] += mass * rec.dr_dp;
                    a[(off_p + i, off_n + j)] += mass * rec.dr_dn;
                    a[(off_p + i, off_p + j)] += mass * rec.dr_dp;
                    let _ = gj;
                    for m in 0..d {
                        a[(off_psi + i, off_e + m * s + j)] -= w * lam2 * gi[m] * vj;
                        a[(off_n + i, off_jn + m * s + j)] += w * gi[m] * vj;
                        a[(off_p + i, off_jp + m * s + j)] -= w * gi[m] * vj;
                        a[(off_e + m * s + i, off_e + m * s + j)] += mass;
                        a[(off_e + m * s + i, off_psi + j)] -= w * gi[m] * vj;
                        a[(off_jn + m * s + i, off_jn + m * s + j)] += mass;
                        a[(off_jp + m * s + i, off_jp + m * s + j)] += mass;
                        if !ha {
                            a[(off_jn + m * s + i, off_n + j)] +=
                                w * (-prob.mu_n * vi * vj * e_q[m] + prob.d_n * gi[m] * vj);
                            a[(off_jn + m * s + i, off_e + m * s + j)] -=
                                w * prob.mu_n * vi * vj * n_q;
                            a[(off_jp + m * s + i, off_p + j)] +=
                                w * (-prob.mu_p * vi * vj * e_q[m] - prob.d_p * gi[m] * vj);
                            a[(off_jp + m * s + i, off_e + m * s + j)] -=
                                w * prob.mu_p * vi * vj * p_q;
                        }
                    }
                }
            }
        }
    }

    // Harmonic-averaging nodal form on degree-1 cells. The carrier
    // auxiliary equations couple vertex pairs through Bernoulli weights of
    // the potential difference; see the e_ij row identity in the geometry.
    if ha {
        let e = geom.e_coeff.as_ref().expect("HA cell carries e_coeff");
        for i in 0..s {
            for j in 0..s {
                if i == j {
                    continue;
                }
                let dpsi = local[off_psi + i] - local[off_psi + j];
                let n_i = local[off_n + i];
                let n_j = local[off_n + j];
                let p_i = local[off_p + i];
                let p_j = local[off_p + j];
                let (bn_p, dbn_p) = bernoulli_with_derivative(dpsi / prob.v_n);
                let (bn_m, dbn_m) = bernoulli_with_derivative(-dpsi / prob.v_n);
                let (bp_p, dbp_p) = bernoulli_with_derivative(dpsi / prob.v_p);
                let (bp_m, dbp_m) = bernoulli_with_derivative(-dpsi / prob.v_p);
                let bracket_n = prob.d_n * (bn_p * n_i - bn_m * n_j);
                let bracket_p = prob.d_p * (bp_p * p_j - bp_m * p_i);
                let dpsi_n = prob.d_n / prob.v_n * (dbn_p * n_i + dbn_m * n_j);
                let dpsi_p = prob.d_p / prob.v_p * (dbp_p * p_j + dbp_m * p_i);
                for m in 0..d {
                    let em = e[i][j][m];
                    res[off_jn + m * s + i] += bracket_n * em;
                    res[off_jp + m * s + i] += bracket_p * em;
                    if let Some(a) = a.as_mut() {
                        a[(off_jn + m * s + i, off_n + i)] += prob.d_n * bn_p * em;
                        a[(off_jn + m * s + i, off_n + j)] -= prob.d_n * bn_m * em;
                        a[(off_jn + m * s + i, off_psi + i)] += dpsi_n * em;
                        a[(off_jn + m * s + i, off_psi + j)] -= dpsi_n * em;
                        a[(off_jp + m * s + i, off_p + j)] += prob.d_p * bp_p * em;
                        a[(off_jp + m * s + i, off_p + i)] -= prob.d_p * bp_m * em;
                        a[(off_jp + m * s + i, off_psi + i)] += dpsi_p * em;
                        a[(off_jp + m * s + i, off_psi + j)] -= dpsi_p * em;
                    }
                }
            }
        }
    }

    // Face terms.
    for (fidx, face) in geom.faces.iter().enumerate() {
        let nodes = face.nodes;
        let tof = face.trace_offset;
        let nv = face.normal;
        for q in 0..face.qw.len() {
            let w = face.qw[q];
            let cval = &face.cval[q];
            let tval = &face.tval[q];
            let mut psi_f = 0.0;
            let mut n_f = 0.0;
            let mut p_f = 0.0;
            let mut e_f = [0.0, 0.0];
            let mut jn_n = 0.0;
            let mut jp_n = 0.0;
            for i in 0..s {
                let v = cval[i];
                psi_f += local[off_psi + i] * v;
                n_f += local[off_n + i] * v;
                p_f += local[off_p + i] * v;
                for m in 0..d {
                    e_f[m] += local[off_e + m * s + i] * v;
                    jn_n += local[off_jn + m * s + i] * v * nv[m];
                    jp_n += local[off_jp + m * s + i] * v * nv[m];
                }
            }
            let en: f64 = (0..d).map(|m| e_f[m] * nv[m]).sum();
            let mut psih = 0.0;
            let mut nh = 0.0;
            let mut ph = 0.0;
            for k in 0..nodes {
                psih += trace[tof + k] * tval[k];
                nh += trace[tof + nodes + k] * tval[k];
                ph += trace[tof + 2 * nodes + k] * tval[k];
            }
            let (tau_n, tau_p) = tau.per_face[fidx][q];
            let ehat_n = en + TAU_PSI * (psi_f - psih);
            let jnhat = jn_n + tau_n * (n_f - nh);
            let jphat = jp_n + tau_p * (p_f - ph);
            // Unit direction of the vector numerical flux E-hat, for the
            // tau chain rule (zero at the nondifferentiable origin).
            let mut ehat_vec = [0.0, 0.0];
            let mut ehat_norm = 0.0;
            for m in 0..d {
                ehat_vec[m] = e_f[m] + TAU_PSI * (psi_f - psih) * nv[m];
                ehat_norm += ehat_vec[m] * ehat_vec[m];
            }
            ehat_norm = ehat_norm.sqrt();
            let ehat_dir = if ehat_norm > 1e-300 {
                [ehat_vec[0] / ehat_norm, ehat_vec[1] / ehat_norm]
            } else {
                [0.0, 0.0]
            };
            let ehat_dir_n: f64 = (0..d).map(|m| ehat_dir[m] * nv[m]).sum();

            for i in 0..s {
                let v = cval[i];
                res[off_psi + i] += w * lam2 * v * ehat_n;
                res[off_n + i] -= w * v * jnhat;
                res[off_p + i] += w * v * jphat;
                for m in 0..d {
                    res[off_e + m * s + i] += w * v * nv[m] * psih;
                    if ha {
                        res[off_jn + m * s + i] -= prob.d_n * w * v * nv[m] * (nh - n_f);
                        res[off_jp + m * s + i] += prob.d_p * w * v * nv[m] * (ph - p_f);
                    } else {
                        res[off_jn + m * s + i] -= prob.d_n * w * v * nv[m] * nh;
                        res[off_jp + m * s + i] += prob.d_p * w * v * nv[m] * ph;
                    }
                }
            }
            match face.kind {
                FaceKind::Transmission => {
                    for k in 0..nodes {
                        let lam = tval[k];
                        rtr[tof + k] += w * lam * ehat_n;
                        rtr[tof + nodes + k] += w * lam * jnhat;
                        rtr[tof + 2 * nodes + k] += w * lam * jphat;
                    }
                }
                FaceKind::Dirichlet { contact } => {
                    let (g_psi, g_n, g_p) =
                        ohmic_contact_values(face.qdop[q], prob.n_ie, bias[contact]);
                    for k in 0..nodes {
                        let lam = tval[k];
                        rtr[tof + k] += w * lam * (psih - g_psi);
                        rtr[tof + nodes + k] += w * lam * (nh - g_n);
                        rtr[tof + 2 * nodes + k] += w * lam * (ph - g_p);
                    }
                }
            }

            if with_jacobian {
                let a = a.as_mut().unwrap();
                let b = b.as_mut().unwrap();
                let c = c.as_mut().unwrap();
                let dmat = dmat.as_mut().unwrap();
                for i in 0..s {
                    let vi = cval[i];
                    for j in 0..s {
                        let vj = cval[j];
                        a[(off_psi + i, off_psi + j)] += w * lam2 * vi * TAU_PSI * vj;
                        a[(off_n + i, off_n + j)] -= w * vi * tau_n * vj;
                        a[(off_p + i, off_p + j)] += w * vi * tau_p * vj;
                        for m in 0..d {
                            a[(off_psi + i, off_e + m * s + j)] += w * lam2 * vi * vj * nv[m];
                            a[(off_n + i, off_jn + m * s + j)] -= w * vi * vj * nv[m];
                            a[(off_p + i, off_jp + m * s + j)] += w * vi * vj * nv[m];
                            if ha {
                                a[(off_jn + m * s + i, off_n + j)] +=
                                    prob.d_n * w * vi * nv[m] * vj;
                                a[(off_jp + m * s + i, off_p + j)] -=
                                    prob.d_p * w * vi * nv[m] * vj;
                            }
                        }
                    }
                    for k in 0..nodes {
                        let lam = tval[k];
                        b[(off_psi + i, tof + k)] -= w * lam2 * vi * TAU_PSI * lam;
                        b[(off_n + i, tof + nodes + k)] += w * vi * tau_n * lam;
                        b[(off_p + i, tof + 2 * nodes + k)] -= w * vi * tau_p * lam;
                        for m in 0..d {
                            b[(off_e + m * s + i, tof + k)] += w * vi * nv[m] * lam;
                            b[(off_jn + m * s + i, tof + nodes + k)] -=
                                prob.d_n * w * vi * nv[m] * lam;
                            b[(off_jp + m * s + i, tof + 2 * nodes + k)] +=
                                prob.d_p * w * vi * nv[m] * lam;
                        }
                    }
                }
                match face.kind {
                    FaceKind::Transmission => {
                        for k in 0..nodes {
                            let lam = tval[k];
                            for j in 0..s {
                                let vj = cval[j];
                                c[(tof + k, off_psi + j)] += w * lam * TAU_PSI * vj;
                                c[(tof + nodes + k, off_n + j)] += w * lam * tau_n * vj;
                                c[(tof + 2 * nodes + k, off_p + j)] += w * lam * tau_p * vj;
                                for m in 0..d {
                                    c[(tof + k, off_e + m * s + j)] += w * lam * vj * nv[m];
                                    c[(tof + nodes + k, off_jn + m * s + j)] +=
                                        w * lam * vj * nv[m];
                                    c[(tof + 2 * nodes + k, off_jp + m * s + j)] +=
                                        w * lam * vj * nv[m];
                                }
                            }
                            for l in 0..nodes {
                                let laml = tval[l];
                                dmat[(tof + k, tof + l)] -= w * lam * TAU_PSI * laml;
                                dmat[(tof + nodes + k, tof + nodes + l)] -= w * lam * tau_n * laml;
                                dmat[(tof + 2 * nodes + k, tof + 2 * nodes + l)] -=
                                    w * lam * tau_p * laml;
                            }
                        }
                    }
                    FaceKind::Dirichlet { .. } => {
                        for k in 0..nodes {
                            let lam = tval[k];
                            for l in 0..nodes {
                                let laml = tval[l];
                                dmat[(tof + k, tof + l)] += w * lam * laml;
                                dmat[(tof + nodes + k, tof + nodes + l)] += w * lam * laml;
                                dmat[(tof + 2 * nodes + k, tof + 2 * nodes + l)] +=
                                    w * lam * laml;
                            }
                        }
                    }
                }

                // Chain rule of tau_n, tau_p through |E-hat|: the frozen
                // model misses these and can misjudge descent directions.
                if tau_derivatives {
                    let fac_n = prob.mu_n * (n_f - nh);
                    let fac_p = prob.mu_p * (p_f - ph);
                    for i in 0..s {
                        let vi = cval[i];
                        for j in 0..s {
                            let vj = cval[j];
                            a[(off_n + i, off_psi + j)] -=
                                w * vi * fac_n * ehat_dir_n * TAU_PSI * vj;
                            a[(off_p + i, off_psi + j)] +=
                                w * vi * fac_p * ehat_dir_n * TAU_PSI * vj;
                            for m in 0..d {
                                a[(off_n + i, off_e + m * s + j)] -=
                                    w * vi * fac_n * ehat_dir[m] * vj;
                                a[(off_p + i, off_e + m * s + j)] +=
                                    w * vi * fac_p * ehat_dir[m] * vj;
                            }
                        }
                        for k in 0..nodes {
                            let lam = tval[k];
                            b[(off_n + i, tof + k)] +=
                                w * vi * fac_n * ehat_dir_n * TAU_PSI * lam;
                            b[(off_p + i, tof + k)] -=
                                w * vi * fac_p * ehat_dir_n * TAU_PSI * lam;
                        }
                    }
                    if matches!(face.kind, FaceKind::Transmission) {
                        for k in 0..nodes {
                            let lam = tval[k];
                            for j in 0..s {
                                let vj = cval[j];
                                c[(tof + nodes + k, off_psi + j)] +=
                                    w * lam * fac_n * ehat_dir_n * TAU_PSI * vj;
                                c[(tof + 2 * nodes + k, off_psi + j)] +=
                                    w * lam * fac_p * ehat_dir_n * TAU_PSI * vj;
                                for m in 0..d {
                                    c[(tof + nodes + k, off_e + m * s + j)] +=
                                        w * lam * fac_n * ehat_dir[m] * vj;
                                    c[(tof + 2 * nodes + k, off_e + m * s + j)] +=
                                        w * lam * fac_p * ehat_dir[m] * vj;
                                }
                            }
                            for l in 0..nodes {
                                let laml = tval[l];
                                dmat[(tof + nodes + k, tof + l)] -=
                                    w * lam * fac_n * ehat_dir_n * TAU_PSI * laml;
                                dmat[(tof + 2 * nodes + k, tof + l)] -=
                                    w * lam * fac_p * ehat_dir_n * TAU_PSI * laml;
                            }
                        }
                    }
                }
            }
        }
    }

    CellAssembly {
        res_local: res,
        res_trace: rtr,
        jac: a.map(|a| CellJacobian {
            a,
            b: b.unwrap(),
            c: c.unwrap(),
            d: dmat.unwrap(),
        }),
        clamped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceSpec;
    use crate::hdg::geom::build_cell_geom;
    use crate::mesh::{Mesh, SchemeTag};
    use crate::physics::MaterialParams;
    use rand::{Rng, SeedableRng};

    fn setup(scheme: SchemeTag, dim: usize) -> (CellGeom, ScaledProblem, Vec<f64>) {
        let device = DeviceSpec::preset(if dim == 1 { "abrupt3" } else { "circular2d" }).unwrap();
        let mut mesh = if dim == 1 {
            Mesh::uniform_1d(0.0, 20.0, 2, &device.contacts).unwrap()
        } else {
            Mesh::uniform_2d([0.0, 0.0], [20.0, 20.0], 2, 2, &[]).unwrap()
        };
        let tags = vec![scheme; mesh.cells.len()];
        mesh.assign_schemes(&tags).unwrap();
        let prob = device.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
        let geom = build_cell_geom(&mesh, 0, &device.doping, &prob);
        let bias = vec![0.0, 0.0];
        (geom, prob, bias)
    }

    #[test]
    fn tau_formula() {
        let device = DeviceSpec::preset("abrupt3").unwrap();
        let mut prob = device.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
        prob.mu_n = 1.0;
        prob.d_n = 1.0;
        let (tpsi, tn, _) = stabilization_taus(5.0, 0.01, &prob);
        assert_eq!(tpsi, 1.0);
        assert!((tn - 105.0).abs() < 1e-12);
        let (_, tn0, tp0) = stabilization_taus(0.0, 0.01, &prob);
        assert!((tn0 - prob.d_n / 0.01).abs() < 1e-12);
        assert!((tp0 - prob.d_p / 0.01).abs() < 1e-12);
    }

    /// Zero doping, constant psi-hat = c, psi = c, everything else zero:
    /// every residual vanishes (constant solution of the Laplace problem).
    #[test]
    fn constant_state_zero_residual() {
        for &scheme in &[SchemeTag::Conventional(1), SchemeTag::Ha, SchemeTag::Conventional(2)] {
            for dim in [1usize, 2] {
                if scheme == SchemeTag::Conventional(2) && dim == 1 {
                    continue;
                }
                let (mut geom, mut prob, bias) = setup(scheme, dim);
                // Pure Laplace setting: no doping, no carriers and no
                // recombination source.
                prob.n_ie = 0.0;
                for v in geom.qdop.iter_mut() {
                    *v = 0.0;
                }
                for f in geom.faces.iter_mut() {
                    for v in f.qdop.iter_mut() {
                        *v = 0.0;
                    }
                    f.kind = FaceKind::Transmission;
                }
                let c = 0.7;
                let mut local = vec![0.0; geom.nloc];
                for i in 0..geom.s {
                    local[geom.off_psi() + i] = c;
                }
                let mut trace = vec![0.0; geom.ntr];
                for f in &geom.faces {
                    for k in 0..f.nodes {
                        trace[f.trace_offset + k] = c;
                    }
                }
                let tau = compute_tau(&geom, &prob, &local, &trace);
                let out = assemble_cell(&geom, &prob, &local, &trace, &bias, &tau, false);
                assert!(out.res_local.amax() < 1e-13, "{scheme:?} dim {dim}");
                assert!(out.res_trace.amax() < 1e-13, "{scheme:?} dim {dim}");
            }
        }
    }

    /// Builds traces that interpolate the interior fields at the edge nodes.
    /// When cell and edge degrees match, the trace polynomial then equals the
    /// interior restriction pointwise.
    fn matching_traces(geom: &CellGeom, mesh: &Mesh, local: &[f64]) -> Vec<f64> {
        use crate::basis::{lobatto_points, TensorBasis};
        let basis = TensorBasis::new(geom.dim, geom.degree);
        let cell = &mesh.cells[geom.cell];
        let ext = [cell.hi[0] - cell.lo[0], cell.hi[1] - cell.lo[1]];
        let mut trace = vec![0.0; geom.ntr];
        for f in &geom.faces {
            let edge = &mesh.edges[f.edge];
            let enodes = lobatto_points(f.nodes - 1);
            for (k, &t) in enodes.iter().enumerate() {
                let mut x_um = [edge.at, 0.0];
                if geom.dim == 2 {
                    let tangent = 1 - edge.axis;
                    let mut pos = [0.0, 0.0];
                    pos[edge.axis] = edge.at;
                    pos[tangent] =
                        edge.span[0] + 0.5 * (t + 1.0) * (edge.span[1] - edge.span[0]);
                    x_um = pos;
                }
                let mut xi = [0.0, 0.0];
                for ax in 0..geom.dim {
                    xi[ax] = 2.0 * (x_um[ax] - cell.lo[ax]) / ext[ax] - 1.0;
                }
                let mut vals = [0.0; 3];
                for i in 0..geom.s {
                    let v = basis.value(i, xi);
                    vals[0] += local[geom.off_psi() + i] * v;
                    vals[1] += local[geom.off_n() + i] * v;
                    vals[2] += local[geom.off_p() + i] * v;
                }
                for var in 0..3 {
                    trace[f.trace_offset + var * f.nodes + k] = vals[var];
                }
            }
        }
        trace
    }

    /// Flux consistency: with traces matching the interior restriction the
    /// stabilization terms vanish, so E-hat = E and J-hat = J on the boundary.
    #[test]
    fn flux_consistency_on_matching_traces() {
        let device = DeviceSpec::preset("circular2d").unwrap();
        let mut mesh = Mesh::uniform_2d([0.0, 0.0], [20.0, 20.0], 2, 2, &[]).unwrap();
        mesh.assign_schemes(&[SchemeTag::Conventional(2); 4]).unwrap();
        let prob = device.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
        let geom = build_cell_geom(&mesh, 0, &device.doping, &prob);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let local: Vec<f64> = (0..geom.nloc).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let trace = matching_traces(&geom, &mesh, &local);
        for f in &geom.faces {
            for q in 0..f.qw.len() {
                let mut int = [0.0; 3];
                for i in 0..geom.s {
                    let v = f.cval[q][i];
                    int[0] += local[geom.off_psi() + i] * v;
                    int[1] += local[geom.off_n() + i] * v;
                    int[2] += local[geom.off_p() + i] * v;
                }
                for var in 0..3 {
                    let mut hat = 0.0;
                    for k in 0..f.nodes {
                        hat += trace[f.trace_offset + var * f.nodes + k] * f.tval[q][k];
                    }
                    assert!(
                        (int[var] - hat).abs() < 1e-12,
                        "face at {:?} var {var}: {} vs {hat}",
                        f.normal,
                        int[var]
                    );
                }
            }
        }
    }

    /// Random fields with physical (positive) carriers, so the recombination
    /// denominator clamp stays quiet and differences stay well-scaled.
    fn random_state(geom: &CellGeom, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
        let mut local: Vec<f64> = (0..geom.nloc).map(|_| rng.gen_range(-0.8..0.8)).collect();
        for i in 0..geom.s {
            local[geom.off_n() + i] = rng.gen_range(0.05..1.0);
            local[geom.off_p() + i] = rng.gen_range(0.05..1.0);
        }
        let mut trace: Vec<f64> = (0..geom.ntr).map(|_| rng.gen_range(-0.8..0.8)).collect();
        for f in &geom.faces {
            for k in 0..2 * f.nodes {
                trace[f.trace_offset + f.nodes + k] = rng.gen_range(0.05..1.0);
            }
        }
        (local, trace)
    }

    /// Compares one analytic column against central differences, relative
    /// to the dominant magnitude of that column (finite differences cannot
    /// resolve entries far below the residual scale).
    fn check_column(
        label: &str,
        col: usize,
        an_a: impl Fn(usize) -> f64,
        an_c: impl Fn(usize) -> f64,
        rp: &CellAssembly,
        rm: &CellAssembly,
        h: f64,
    ) {
        let nloc = rp.res_local.len();
        let ntr = rp.res_trace.len();
        let fd_a: Vec<f64> = (0..nloc)
            .map(|r| (rp.res_local[r] - rm.res_local[r]) / (2.0 * h))
            .collect();
        let fd_c: Vec<f64> = (0..ntr)
            .map(|r| (rp.res_trace[r] - rm.res_trace[r]) / (2.0 * h))
            .collect();
        let mut colmax = 1e-30f64;
        for r in 0..nloc {
            colmax = colmax.max(fd_a[r].abs()).max(an_a(r).abs());
        }
        for r in 0..ntr {
            colmax = colmax.max(fd_c[r].abs()).max(an_c(r).abs());
        }
        for r in 0..nloc {
            let (an, fd) = (an_a(r), fd_a[r]);
            assert!(
                (an - fd).abs() <= 1e-6 * an.abs().max(fd.abs()).max(colmax),
                "{label} local row {r} col {col}: {an} vs {fd}"
            );
        }
        for r in 0..ntr {
            let (an, fd) = (an_c(r), fd_c[r]);
            assert!(
                (an - fd).abs() <= 1e-6 * an.abs().max(fd.abs()).max(colmax),
                "{label} trace row {r} col {col}: {an} vs {fd}"
            );
        }
    }

    /// Analytic blocks match central finite differences with tau frozen.
    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(scheme, dim) in &[
            (SchemeTag::Conventional(1), 1),
            (SchemeTag::Conventional(2), 2),
            (SchemeTag::Ha, 1),
            (SchemeTag::Ha, 2),
        ] {
            let (geom, prob, bias) = setup(scheme, dim);
            let (local, trace) = random_state(&geom, &mut rng);
            let tau = compute_tau(&geom, &prob, &local, &trace);
            let out = assemble_cell(&geom, &prob, &local, &trace, &bias, &tau, true);
            let jac = out.jac.unwrap();
            let h = 4e-6;
            let label = format!("{scheme:?} dim {dim}");
            for col in 0..geom.nloc {
                let mut lp = local.clone();
                let mut lm = local.clone();
                lp[col] += h;
                lm[col] -= h;
                let rp = assemble_cell(&geom, &prob, &lp, &trace, &bias, &tau, false);
                let rm = assemble_cell(&geom, &prob, &lm, &trace, &bias, &tau, false);
                check_column(
                    &label,
                    col,
                    |r| jac.a[(r, col)],
                    |r| jac.c[(r, col)],
                    &rp,
                    &rm,
                    h,
                );
            }
            for col in 0..geom.ntr {
                let mut tp = trace.clone();
                let mut tm = trace.clone();
                tp[col] += h;
                tm[col] -= h;
                let rp = assemble_cell(&geom, &prob, &local, &tp, &bias, &tau, false);
                let rm = assemble_cell(&geom, &prob, &local, &tm, &bias, &tau, false);
                check_column(
                    &label,
                    col,
                    |r| jac.b[(r, col)],
                    |r| jac.d[(r, col)],
                    &rp,
                    &rm,
                    h,
                );
            }
        }
    }

    /// On a discrete Boltzmann state the harmonic-averaging form annihilates:
    /// the J_n and J_p auxiliary residuals reduce to their boundary parts.
    #[test]
    fn ha_boltzmann_annihilation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for dim in [1usize, 2] {
            let (geom, prob, _) = setup(SchemeTag::Ha, dim);
            let e = geom.e_coeff.as_ref().unwrap();
            for _ in 0..200 {
                let psis: Vec<f64> = (0..geom.s).map(|_| rng.gen_range(-40.0..40.0)).collect();
                let psi_max = psis.iter().cloned().fold(f64::MIN, f64::max);
                // Normalize so electron nodal values stay <= 1; the hole
                // state mirrors with the opposite sign.
                let ns: Vec<f64> = psis.iter().map(|&p| ((p - psi_max) / prob.v_n).exp()).collect();
                let psi_min = psis.iter().cloned().fold(f64::MAX, f64::min);
                let ps: Vec<f64> = psis.iter().map(|&p| ((psi_min - p) / prob.v_p).exp()).collect();
                for i in 0..geom.s {
                    let mut an = 0.0;
                    let mut ap = 0.0;
                    for j in 0..geom.s {
                        if i == j {
                            continue;
                        }
                        let dpsi = psis[i] - psis[j];
                        let (bnp, _) = bernoulli_with_derivative(dpsi / prob.v_n);
                        let (bnm, _) = bernoulli_with_derivative(-dpsi / prob.v_n);
                        let (bpp, _) = bernoulli_with_derivative(dpsi / prob.v_p);
                        let (bpm, _) = bernoulli_with_derivative(-dpsi / prob.v_p);
                        for m in 0..dim {
                            an += (bnp * ns[i] - bnm * ns[j]) * e[i][j][m];
                            ap += (bpp * ps[j] - bpm * ps[i]) * e[i][j][m];
                        }
                    }
                    assert!(an.abs() <= 1e-12, "electron row {i}: {an}");
                    assert!(ap.abs() <= 1e-12, "hole row {i}: {ap}");
                }
            }
        }
    }
}
