//! Per-cell geometry, basis and doping tables in scaled coordinates.
//!
//! Built once per (mesh, scheme assignment); assembly then runs unit-free.

use crate::basis::{gauss_legendre, lagrange_value, lobatto_points, TensorBasis};
use crate::doping::DopingProfile;
use crate::mesh::{CellId, EdgeId, EdgeKind, Mesh, SchemeTag};
use crate::physics::ScaledProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceKind {
    /// Interior, Neumann, master or slave face: flux-continuity rows.
    Transmission,
    /// Ohmic contact: trace rows pin the boundary values.
    Dirichlet { contact: usize },
}

#[derive(Debug, Clone)]
pub struct FaceGeom {
    pub edge: EdgeId,
    pub kind: FaceKind,
    pub normal: [f64; 2],
    /// Trace nodes per variable on this edge.
    pub nodes: usize,
    /// Offset of this face's trace block in the cell-local trace vector.
    pub trace_offset: usize,
    /// Quadrature weights including the scaled ds measure (1D: `[1.0]`).
    pub qw: Vec<f64>,
    /// Cell basis values at the face quadrature points.
    pub cval: Vec<Vec<f64>>,
    /// Edge (trace) basis values at the same points.
    pub tval: Vec<Vec<f64>>,
    /// Scaled net doping at the face quadrature points.
    pub qdop: Vec<f64>,
    /// Face quadrature points in um (line sampling and diagnostics).
    pub q_um: Vec<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct CellGeom {
    pub cell: CellId,
    pub dim: usize,
    pub scheme: SchemeTag,
    pub degree: usize,
    /// Scalar basis functions per field.
    pub s: usize,
    /// Local unknowns: 3 vector fields (dim * s each) + 3 scalars (s each).
    pub nloc: usize,
    /// Cell-local trace DoFs: 3 vars * nodes summed over faces.
    pub ntr: usize,
    /// Scaled cell diameter (diagonal).
    pub diameter: f64,
    pub lo_scaled: [f64; 2],
    pub hi_scaled: [f64; 2],
    /// Basis node coordinates in um.
    pub node_um: Vec<[f64; 2]>,
    pub qw: Vec<f64>,
    pub qval: Vec<Vec<f64>>,
    pub qgrad: Vec<Vec<[f64; 2]>>,
    pub qdop: Vec<f64>,
    pub q_um: Vec<[f64; 2]>,
    pub faces: Vec<FaceGeom>,
    /// Geometric coefficients e[i][j][m] of the harmonic-averaging form,
    /// with the row identity e[i][i][m] = -sum_{j!=i} e[i][j][m] built in.
    pub e_coeff: Option<Vec<Vec<[f64; 2]>>>,
}

impl CellGeom {
    pub fn off_e(&self) -> usize {
        0
    }
    pub fn off_jn(&self) -> usize {
        self.dim * self.s
    }
    pub fn off_jp(&self) -> usize {
        2 * self.dim * self.s
    }
    pub fn off_psi(&self) -> usize {
        3 * self.dim * self.s
    }
    pub fn off_n(&self) -> usize {
        self.off_psi() + self.s
    }
    pub fn off_p(&self) -> usize {
        self.off_psi() + 2 * self.s
    }
}

/// Micrometers to scaled coordinates.
fn to_scaled(x_um: f64, x_star_cm: f64) -> f64 {
    x_um * 1e-4 / x_star_cm
}

/// Builds the assembly tables for one cell.
pub fn build_cell_geom(
    mesh: &Mesh,
    cell_id: CellId,
    doping: &DopingProfile,
    prob: &ScaledProblem,
) -> CellGeom {
    let cell = &mesh.cells[cell_id];
    let dim = mesh.dim;
    let degree = cell.scheme.degree() as usize;
    let basis = TensorBasis::new(dim, degree);
    let s = basis.size;
    let x_star = prob.bases.x_star;
    let n_star = prob.bases.n_star;

    let lo_sc = [to_scaled(cell.lo[0], x_star), to_scaled(cell.lo[1], x_star)];
    let hi_sc = [to_scaled(cell.hi[0], x_star), to_scaled(cell.hi[1], x_star)];
    let ext = [hi_sc[0] - lo_sc[0], hi_sc[1] - lo_sc[1]];
    let ext_um = [cell.hi[0] - cell.lo[0], cell.hi[1] - cell.lo[1]];
    let diameter = if dim == 1 {
        ext[0]
    } else {
        (ext[0] * ext[0] + ext[1] * ext[1]).sqrt()
    };

    // Volume quadrature: degree + 2 Gauss points per direction.
    let nq1 = degree + 2;
    let (gx, gw) = gauss_legendre(nq1);
    let mut qw = Vec::new();
    let mut qref = Vec::new();
    let mut q_um = Vec::new();
    if dim == 1 {
        for (x, w) in gx.iter().zip(gw) {
            qref.push([*x, 0.0]);
            qw.push(0.5 * ext[0] * w);
            q_um.push([cell.lo[0] + 0.5 * (x + 1.0) * ext_um[0], 0.0]);
        }
    } else {
        for (y, wy) in gx.iter().zip(gw) {
            for (x, wx) in gx.iter().zip(gw) {
                qref.push([*x, *y]);
                qw.push(0.25 * ext[0] * ext[1] * wx * wy);
                q_um.push([
                    cell.lo[0] + 0.5 * (x + 1.0) * ext_um[0],
                    cell.lo[1] + 0.5 * (y + 1.0) * ext_um[1],
                ]);
            }
        }
    }
    let qval: Vec<Vec<f64>> = qref
        .iter()
        .map(|&xi| (0..s).map(|i| basis.value(i, xi)).collect())
        .collect();
    let qgrad: Vec<Vec<[f64; 2]>> = qref
        .iter()
        .map(|&xi| {
            (0..s)
                .map(|i| {
                    let g = basis.grad_ref(i, xi);
                    [
                        g[0] * 2.0 / ext[0],
                        if dim == 2 { g[1] * 2.0 / ext[1] } else { 0.0 },
                    ]
                })
                .collect()
        })
        .collect();
    let qdop: Vec<f64> = q_um.iter().map(|&x| doping.eval(x) / n_star).collect();

    let node_um: Vec<[f64; 2]> = (0..s)
        .map(|i| {
            let xi = basis.node_ref(i);
            [
                cell.lo[0] + 0.5 * (xi[0] + 1.0) * ext_um[0],
                if dim == 2 {
                    cell.lo[1] + 0.5 * (xi[1] + 1.0) * ext_um[1]
                } else {
                    0.0
                },
            ]
        })
        .collect();

    // Faces.
    let mut faces = Vec::with_capacity(cell.edges.len());
    let mut trace_offset = 0;
    for &eid in &cell.edges {
        let edge = &mesh.edges[eid];
        let nsign = edge.normal_sign(cell_id);
        let kind = match edge.kind {
            EdgeKind::Dirichlet { contact } => FaceKind::Dirichlet { contact },
            _ => FaceKind::Transmission,
        };
        let mut normal = [0.0, 0.0];
        normal[edge.axis] = nsign;
        let nodes = if dim == 1 { 1 } else { edge.degree as usize + 1 };

        let (fqw, fq_um, cval, tval) = if dim == 1 {
            // Point edge: single evaluation, unit weight.
            let xi = if nsign > 0.0 { 1.0 } else { -1.0 };
            let cv = (0..s).map(|i| basis.value(i, [xi, 0.0])).collect();
            (
                vec![1.0],
                vec![[edge.at, 0.0]],
                vec![cv],
                vec![vec![1.0]],
            )
        } else {
            let tangent = 1 - edge.axis;
            let nfq = degree.max(edge.degree as usize) + 2;
            let (fx, fw) = gauss_legendre(nfq);
            let span_sc = [
                to_scaled(edge.span[0], x_star),
                to_scaled(edge.span[1], x_star),
            ];
            let elen = span_sc[1] - span_sc[0];
            let enodes = lobatto_points(edge.degree as usize);
            let mut fqw = Vec::with_capacity(nfq);
            let mut fq_um = Vec::with_capacity(nfq);
            let mut cval = Vec::with_capacity(nfq);
            let mut tval = Vec::with_capacity(nfq);
            for (t, w) in fx.iter().zip(fw) {
                let t_um = edge.span[0] + 0.5 * (t + 1.0) * (edge.span[1] - edge.span[0]);
                let mut x_um = [0.0, 0.0];
                x_um[edge.axis] = edge.at;
                x_um[tangent] = t_um;
                // Cell reference coordinates of the face point.
                let mut xi = [0.0, 0.0];
                xi[edge.axis] = nsign;
                xi[tangent] =
                    2.0 * (x_um[tangent] - cell.lo[tangent]) / ext_um[tangent] - 1.0;
                cval.push((0..s).map(|i| basis.value(i, xi)).collect());
                tval.push(
                    (0..nodes)
                        .map(|k| lagrange_value(enodes, k, *t))
                        .collect(),
                );
                fqw.push(0.5 * elen * w);
                fq_um.push(x_um);
            }
            (fqw, fq_um, cval, tval)
        };
        let qdop_f = fq_um.iter().map(|&x| doping.eval(x) / n_star).collect();
        faces.push(FaceGeom {
            edge: eid,
            kind,
            normal,
            nodes,
            trace_offset,
            qw: fqw,
            cval,
            tval,
            qdop: qdop_f,
            q_um: fq_um,
        });
        trace_offset += 3 * nodes;
    }

    // Harmonic-averaging geometric coefficients on degree-1 cells.
    let e_coeff = if degree == 1 {
        let mut e = vec![vec![[0.0; 2]; s]; s];
        for i in 0..s {
            for j in 0..s {
                if i == j {
                    continue;
                }
                for m in 0..dim {
                    let mut v = 0.0;
                    for q in 0..qw.len() {
                        v += qw[q] * qval[q][i] * qgrad[q][j][m];
                    }
                    e[i][j][m] = v;
                }
            }
            for m in 0..dim {
                let mut diag = 0.0;
                for j in 0..s {
                    if j != i {
                        diag -= e[i][j][m];
                    }
                }
                e[i][i][m] = diag;
            }
        }
        Some(e)
    } else {
        None
    };

    let nloc = 3 * dim * s + 3 * s;
    CellGeom {
        cell: cell_id,
        dim,
        scheme: cell.scheme,
        degree,
        s,
        nloc,
        ntr: trace_offset,
        diameter,
        lo_scaled: lo_sc,
        hi_scaled: hi_sc,
        node_um,
        qw,
        qval,
        qgrad,
        qdop,
        q_um,
        faces,
        e_coeff,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceSpec;
    use crate::physics::MaterialParams;

    fn unit_problem() -> (Mesh, DopingProfile, ScaledProblem) {
        let device = DeviceSpec::preset("abrupt3").unwrap();
        let mesh = Mesh::uniform_1d(0.0, 20.0, 4, &device.contacts).unwrap();
        let prob = device.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
        (mesh, device.doping.clone(), prob)
    }

    #[test]
    fn one_d_volume_and_faces() {
        let (mesh, doping, prob) = unit_problem();
        let g = build_cell_geom(&mesh, 0, &doping, &prob);
        // Scaled cell width is 1/4 of the domain.
        let vol: f64 = g.qw.iter().sum();
        assert!((vol - 0.25).abs() < 1e-14);
        assert_eq!(g.faces.len(), 2);
        assert_eq!(g.faces[0].normal, [-1.0, 0.0]);
        assert_eq!(g.faces[1].normal, [1.0, 0.0]);
        assert_eq!(g.ntr, 6);
        assert_eq!(g.nloc, 12);
    }

    #[test]
    fn e_coeff_unit_interval() {
        // On any 1D degree-1 cell, e[0][1][0] = int s_0 s_1' = 1/2 and the
        // row identity holds bitwise, independent of the cell width.
        let (mesh, doping, prob) = unit_problem();
        for cid in 0..mesh.cells.len() {
            let g = build_cell_geom(&mesh, cid, &doping, &prob);
            let e = g.e_coeff.as_ref().unwrap();
            assert!((e[0][1][0] - 0.5).abs() < 1e-14);
            assert!((e[1][0][0] + 0.5).abs() < 1e-14);
            for i in 0..2 {
                let sum: f64 = (0..2).map(|j| e[i][j][0]).sum();
                assert_eq!(sum, 0.0);
            }
        }
    }

    #[test]
    fn e_coeff_rows_vanish_2d() {
        let mesh = Mesh::uniform_2d([0.0, 0.0], [2.0, 3.0], 2, 2, &[]).unwrap();
        let device = DeviceSpec::preset("circular2d").unwrap();
        let prob = device.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
        let g = build_cell_geom(&mesh, 1, &device.doping, &prob);
        let e = g.e_coeff.as_ref().unwrap();
        for i in 0..4 {
            for m in 0..2 {
                // The diagonal is assembled as the negated off-diagonal sum,
                // so adding it last gives exact cancellation.
                let off: f64 = (0..4).filter(|j| *j != i).map(|j| e[i][j][m]).sum();
                assert_eq!(off + e[i][i][m], 0.0, "row {i} component {m}");
            }
        }
    }

    #[test]
    fn face_quadrature_measures_scaled_length(){
        let mesh = Mesh::uniform_2d([0.0, 0.0], [4.0, 2.0], 2, 1, &[]).unwrap();
        let device = DeviceSpec::preset("circular2d").unwrap();
        let prob = device.scaled_problem(&MaterialParams::silicon_300k()).unwrap();
        let g = build_cell_geom(&mesh, 0, &device.doping, &prob);
        let x_star_um = prob.bases.x_star_um();
        for f in &g.faces {
            let expect = mesh.edges[f.edge].length() / x_star_um;
            let got: f64 = f.qw.iter().sum();
            assert!((got - expect).abs() < 1e-14);
        }
    }
}
