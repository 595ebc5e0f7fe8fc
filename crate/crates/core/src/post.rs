//! Superconvergent local post-processing, observables (line samples, error
//! norms, terminal currents) and the S/O/F stability classifier.

use crate::basis::{gauss_legendre, TensorBasis};
use crate::hdg::{DiscreteState, HdgSystem};
use crate::mesh::SchemeTag;
use crate::report::Stability;
use nalgebra::{DMatrix, DVector};

/// Degree p+1 reconstructions of the scalar fields on conventional cells.
///
/// HA cells are excluded: entries hold the original degree-1 coefficients
/// re-expressed in the degree-2 nodal basis, and `reconstructed[cell]` is
/// false for them (as well as for cells where the local solve fell back).
#[derive(Debug, Clone)]
pub struct PostState {
    pub degree: Vec<usize>,
    pub psi: Vec<Vec<f64>>,
    pub n: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub reconstructed: Vec<bool>,
    pub fallback_count: usize,
}

/// Solves the cell-local mean-preservation + gradient-matching systems for
/// psi*, n*, p* of degree p+1 on every conventional cell.
pub fn postprocess_scalars(system: &HdgSystem, state: &DiscreteState) -> PostState {
    let n_cells = system.n_cells();
    let mut post = PostState {
        degree: Vec::with_capacity(n_cells),
        psi: Vec::with_capacity(n_cells),
        n: Vec::with_capacity(n_cells),
        p: Vec::with_capacity(n_cells),
        reconstructed: Vec::with_capacity(n_cells),
        fallback_count: 0,
    };
    for c in 0..n_cells {
        let geom = &system.geoms[c];
        let dim = geom.dim;
        let q_deg = geom.degree + 1;
        let embed = |field_off: usize| -> Vec<f64> {
            // Original polynomial re-expressed on the degree q nodal grid.
            let basis_p = TensorBasis::new(dim, geom.degree);
            let basis_q = TensorBasis::new(dim, q_deg);
            (0..basis_q.size)
                .map(|i| {
                    let xi = basis_q.node_ref(i);
                    (0..geom.s)
                        .map(|j| state.cells[c][field_off + j] * basis_p.value(j, xi))
                        .sum()
                })
                .collect()
        };
        let ha = matches!(geom.scheme, SchemeTag::Ha);
        if ha {
            post.degree.push(q_deg);
            post.psi.push(embed(geom.off_psi()));
            post.n.push(embed(geom.off_n()));
            post.p.push(embed(geom.off_p()));
            post.reconstructed.push(false);
            continue;
        }
        match reconstruct_cell(system, state, c) {
            Some((psi, n, p)) => {
                post.degree.push(q_deg);
                post.psi.push(psi);
                post.n.push(n);
                post.p.push(p);
                post.reconstructed.push(true);
            }
            None => {
                post.degree.push(q_deg);
                post.psi.push(embed(geom.off_psi()));
                post.n.push(embed(geom.off_n()));
                post.p.push(embed(geom.off_p()));
                post.reconstructed.push(false);
                post.fallback_count += 1;
            }
        }
    }
    post
}

/// One cell's post-processing solve; `None` signals a singular local system.
pub fn reconstruct_cell(
    system: &HdgSystem,
    state: &DiscreteState,
    cell: usize,
) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let geom = &system.geoms[cell];
    let prob = &system.prob;
    let dim = geom.dim;
    let q_deg = geom.degree + 1;
    let basis_p = TensorBasis::new(dim, geom.degree);
    let basis_q = TensorBasis::new(dim, q_deg);
    let sq = basis_q.size;
    let local = &state.cells[cell];

    // Fresh quadrature exact for the degree-(p+1) stiffness integrands.
    let n1 = q_deg + 2;
    let (gx, gw) = gauss_legendre(n1);
    let ext = [
        geom.hi_scaled[0] - geom.lo_scaled[0],
        geom.hi_scaled[1] - geom.lo_scaled[1],
    ];
    let mut pts: Vec<([f64; 2], f64)> = Vec::new();
    if dim == 1 {
        for (x, w) in gx.iter().zip(gw) {
            pts.push(([*x, 0.0], 0.5 * ext[0] * w));
        }
    } else {
        for (y, wy) in gx.iter().zip(gw) {
            for (x, wx) in gx.iter().zip(gw) {
                pts.push(([*x, *y], 0.25 * ext[0] * ext[1] * wx * wy));
            }
        }
    }
    let scale = [2.0 / ext[0], if dim == 2 { 2.0 / ext[1] } else { 0.0 }];

    let mut m_psi = DMatrix::<f64>::zeros(sq, sq);
    let mut m_n = DMatrix::<f64>::zeros(sq, sq);
    let mut m_p = DMatrix::<f64>::zeros(sq, sq);
    let mut r_psi = DVector::<f64>::zeros(sq);
    let mut r_n = DVector::<f64>::zeros(sq);
    let mut r_p = DVector::<f64>::zeros(sq);
    // Mean rows replace the redundant row 0 of each gradient system.
    let mut mean_row = DVector::<f64>::zeros(sq);
    let mut mean_psi = 0.0;
    let mut mean_n = 0.0;
    let mut mean_p = 0.0;

    for (xi, w) in pts {
        // Original fields at the quadrature point.
        let mut psi = 0.0;
        let mut nv = 0.0;
        let mut pv = 0.0;
        let mut e = [0.0, 0.0];
        let mut jn = [0.0, 0.0];
        let mut jp = [0.0, 0.0];
        for j in 0..geom.s {
            let v = basis_p.value(j, xi);
            psi += local[geom.off_psi() + j] * v;
            nv += local[geom.off_n() + j] * v;
            pv += local[geom.off_p() + j] * v;
            for m in 0..dim {
                e[m] += local[geom.off_e() + m * geom.s + j] * v;
                jn[m] += local[geom.off_jn() + m * geom.s + j] * v;
                jp[m] += local[geom.off_jp() + m * geom.s + j] * v;
            }
        }
        let vals: Vec<f64> = (0..sq).map(|i| basis_q.value(i, xi)).collect();
        let grads: Vec<[f64; 2]> = (0..sq)
            .map(|i| {
                let g = basis_q.grad_ref(i, xi);
                [g[0] * scale[0], g[1] * scale[1]]
            })
            .collect();
        mean_psi += w * psi;
        mean_n += w * nv;
        mean_p += w * pv;
        for i in 0..sq {
            mean_row[i] += w * vals[i];
            let gi = grads[i];
            let ge: f64 = (0..dim).map(|m| gi[m] * e[m]).sum();
            r_psi[i] += w * -(0..dim).map(|m| gi[m] * e[m]).sum::<f64>();
            r_n[i] += w * (0..dim).map(|m| gi[m] * jn[m]).sum::<f64>();
            r_p[i] += w * (0..dim).map(|m| gi[m] * jp[m]).sum::<f64>();
            for j in 0..sq {
                let gg: f64 = (0..dim).map(|m| gi[m] * grads[j][m]).sum();
                m_psi[(i, j)] += w * gg;
                m_n[(i, j)] += w * (prob.d_n * gg + prob.mu_n * ge * vals[j]);
                m_p[(i, j)] += w * (prob.mu_p * ge * vals[j] - prob.d_p * gg);
            }
        }
    }
    for j in 0..sq {
        m_psi[(0, j)] = mean_row[j];
        m_n[(0, j)] = mean_row[j];
        m_p[(0, j)] = mean_row[j];
    }
    r_psi[0] = mean_psi;
    r_n[0] = mean_n;
    r_p[0] = mean_p;

    let psi = m_psi.lu().solve(&r_psi)?;
    let n = m_n.lu().solve(&r_n)?;
    let p = m_p.lu().solve(&r_p)?;
    Some((
        psi.as_slice().to_vec(),
        n.as_slice().to_vec(),
        p.as_slice().to_vec(),
    ))
}

/// Evaluates a post-processed scalar (0: psi, 1: n, 2: p) at a point.
pub fn eval_post_at(
    system: &HdgSystem,
    post: &PostState,
    var: usize,
    x_um: [f64; 2],
) -> Option<f64> {
    let tol = 1e-12 * (system.mesh.hi[0] - system.mesh.lo[0]).max(1.0);
    let cell = system.mesh.cells.iter().position(|c| {
        x_um[0] >= c.lo[0] - tol
            && x_um[0] <= c.hi[0] + tol
            && (system.mesh.dim == 1 || (x_um[1] >= c.lo[1] - tol && x_um[1] <= c.hi[1] + tol))
    })?;
    let c = &system.mesh.cells[cell];
    let basis = TensorBasis::new(system.mesh.dim, post.degree[cell]);
    let mut xi = [0.0, 0.0];
    for ax in 0..system.mesh.dim {
        xi[ax] = 2.0 * (x_um[ax] - c.lo[ax]) / (c.hi[ax] - c.lo[ax]) - 1.0;
    }
    let coeffs = match var {
        0 => &post.psi[cell],
        1 => &post.n[cell],
        _ => &post.p[cell],
    };
    Some(
        (0..basis.size)
            .map(|i| coeffs[i] * basis.value(i, xi))
            .sum(),
    )
}

/// Cell means of a field before/after post-processing (mean preservation).
pub fn cell_mean(system: &HdgSystem, cell: usize, coeffs: &[f64], degree: usize) -> f64 {
    let geom = &system.geoms[cell];
    let basis = TensorBasis::new(geom.dim, degree);
    let n1 = degree + 2;
    let (gx, gw) = gauss_legendre(n1);
    let ext = [
        geom.hi_scaled[0] - geom.lo_scaled[0],
        geom.hi_scaled[1] - geom.lo_scaled[1],
    ];
    let mut acc = 0.0;
    let mut vol = 0.0;
    if geom.dim == 1 {
        for (x, w) in gx.iter().zip(gw) {
            let ww = 0.5 * ext[0] * w;
            let v: f64 = (0..basis.size)
                .map(|i| coeffs[i] * basis.value(i, [*x, 0.0]))
                .sum();
            acc += ww * v;
            vol += ww;
        }
    } else {
        for (y, wy) in gx.iter().zip(gw) {
            for (x, wx) in gx.iter().zip(gw) {
                let ww = 0.25 * ext[0] * ext[1] * wx * wy;
                let v: f64 = (0..basis.size)
                    .map(|i| coeffs[i] * basis.value(i, [*x, *y]))
                    .sum();
                acc += ww * v;
                vol += ww;
            }
        }
    }
    acc / vol
}

/// One line-sample row in physical units.
#[derive(Debug, Clone, Copy)]
pub struct LineSample {
    pub x_um: [f64; 2],
    pub psi_v: f64,
    pub n_cm3: f64,
    pub p_cm3: f64,
    pub e_vcm: f64,
    pub jn_acm2: f64,
    pub jp_acm2: f64,
}

/// Samples the cell-local polynomials at `count` equispaced points between
/// the endpoints (um). Interface points take the lower cell index.
pub fn sample_line(
    system: &HdgSystem,
    state: &DiscreteState,
    a_um: [f64; 2],
    b_um: [f64; 2],
    count: usize,
) -> Option<Vec<LineSample>> {
    let b = &system.prob.bases;
    let e_star = b.v_star / b.x_star;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let t = if count == 1 {
            0.0
        } else {
            k as f64 / (count - 1) as f64
        };
        let x = [a_um[0] + t * (b_um[0] - a_um[0]), a_um[1] + t * (b_um[1] - a_um[1])];
        let f = system.eval_at(state, x)?;
        let e_mag = (f.e[0] * f.e[0] + f.e[1] * f.e[1]).sqrt();
        let j_mag = |v: [f64; 2]| (v[0] * v[0] + v[1] * v[1]).sqrt();
        out.push(LineSample {
            x_um: x,
            psi_v: f.psi * b.v_star,
            n_cm3: f.n * b.n_star,
            p_cm3: f.p * b.n_star,
            e_vcm: e_mag * e_star,
            jn_acm2: j_mag(f.jn) * b.j_star,
            jp_acm2: j_mag(f.jp) * b.j_star,
        });
    }
    Some(out)
}

/// Discrete L-infinity and L2 norms of `coarse(x) - reference(x)` over the
/// reference sample points.
pub fn error_norms(
    points: &[f64],
    reference: &[f64],
    eval: impl Fn(f64) -> f64,
) -> (f64, f64) {
    assert_eq!(points.len(), reference.len());
    let mut linf = 0.0f64;
    let mut l2 = 0.0f64;
    for (x, r) in points.iter().zip(reference) {
        let d = eval(*x) - r;
        linf = linf.max(d.abs());
        l2 += d * d;
    }
    (linf, (l2 / points.len() as f64).sqrt())
}

/// Least-squares slope of log(err) against log(h).
pub fn fit_slope(h: &[f64], err: &[f64]) -> f64 {
    let n = h.len() as f64;
    let xs: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// The two-part oscillation metric behind the S/O/F table: negative carrier
/// excursions beyond 1e-6 of the maximum, or the potential leaving the fine
/// reference envelope by more than 1% of its range.
pub fn classify_stability(
    sweep_completed: bool,
    min_n: f64,
    max_n: f64,
    min_p: f64,
    max_p: f64,
    psi_min: f64,
    psi_max: f64,
    ref_psi_min: f64,
    ref_psi_max: f64,
) -> Stability {
    if !sweep_completed {
        return Stability::F;
    }
    let carrier_osc = min_n < -1e-6 * max_n.abs() || min_p < -1e-6 * max_p.abs();
    let range = ref_psi_max - ref_psi_min;
    let envelope_osc =
        psi_min < ref_psi_min - 0.01 * range || psi_max > ref_psi_max + 0.01 * range;
    if carrier_osc || envelope_osc {
        Stability::O
    } else {
        Stability::S
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifier_definitions() {
        // Failed sweep is F regardless of the state.
        assert_eq!(
            classify_stability(false, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0),
            Stability::F
        );
        // Negative excursion of -1e-3 max fires O.
        assert_eq!(
            classify_stability(true, -1e-3, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0),
            Stability::O
        );
        // Envelope violation fires O.
        assert_eq!(
            classify_stability(true, 0.0, 1.0, 0.0, 1.0, -0.5, 1.0, 0.0, 1.0),
            Stability::O
        );
        // Clean completion is S.
        assert_eq!(
            classify_stability(true, 0.0, 1.0, 0.0, 1.0, 0.001, 0.999, 0.0, 1.0),
            Stability::S
        );
    }

    #[test]
    fn norms_against_constant_offset() {
        let points: Vec<f64> = (0..11).map(|i| i as f64).collect();
        let reference: Vec<f64> = points.iter().map(|x| 2.0 * x).collect();
        let (linf, l2) = error_norms(&points, &reference, |x| 2.0 * x + 0.25);
        assert!((linf - 0.25).abs() < 1e-15);
        assert!((l2 - 0.25).abs() < 1e-15);
        let (z, _) = error_norms(&points, &reference, |x| 2.0 * x);
        assert_eq!(z, 0.0);
    }

    #[test]
    fn slope_fit_recovers_order() {
        let h = [0.1, 0.05, 0.025, 0.0125];
        let err: Vec<f64> = h.iter().map(|v| 3.0 * v * v).collect();
        let s = fit_slope(&h, &err);
        assert!((s - 2.0).abs() < 1e-12);
    }
}
