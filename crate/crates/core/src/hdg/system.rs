//! The assembled HDG backend: per-cell condensation, constrained skeleton
//! solve, local reconstruction and field evaluation.

use super::assembly::{assemble_cell, assemble_cell_opts, compute_tau, CellAssembly};
use super::geom::{build_cell_geom, CellGeom, FaceKind};
use crate::basis::{lobatto_points, TensorBasis};
use crate::doping::DopingProfile;
use crate::error::SolveError;
use crate::mesh::{EdgeKind, Mesh, SkeletonLayout, TRACE_VARS};
use crate::physics::{equilibrium_potential, ohmic_contact_values, ScaledProblem};
use crate::solver::{condense, CondensedCell, Discretization, SkeletonSolver};
use crate::par_map_collect;
use nalgebra::{DMatrix, DVector};
use std::sync::Mutex;

const TAU_PSI_PB: f64 = super::assembly::TAU_PSI;

/// Per-cell coefficients for (E, J_n, J_p, psi, n, p) plus skeleton traces.
#[derive(Debug, Clone)]
pub struct DiscreteState {
    pub cells: Vec<Vec<f64>>,
    /// Full trace vector over every edge including slaves.
    pub traces: Vec<f64>,
}

/// An HDG discretization of one device on one mesh.
pub struct HdgSystem {
    pub mesh: Mesh,
    pub prob: ScaledProblem,
    pub doping: DopingProfile,
    pub layout: SkeletonLayout,
    pub geoms: Vec<CellGeom>,
    pub n_contacts: usize,
    /// Per cell, per cell-local trace DoF: global solve DoFs with weights.
    resolutions: Vec<Vec<Vec<(usize, f64)>>>,
    solver: Mutex<SkeletonSolver>,
}

impl HdgSystem {
    pub fn new(
        mesh: Mesh,
        doping: DopingProfile,
        prob: ScaledProblem,
        n_contacts: usize,
    ) -> Self {
        let layout = SkeletonLayout::new(&mesh);
        let geoms: Vec<CellGeom> = {
            let mesh_ref = &mesh;
            let dop = &doping;
            let prob_ref = &prob;
            par_map_collect(mesh.cells.len(), move |c| {
                build_cell_geom(mesh_ref, c, dop, prob_ref)
            })
        };
        let resolutions = geoms
            .iter()
            .map(|g| {
                let mut per_cell = Vec::with_capacity(g.ntr);
                for face in &g.faces {
                    for var in 0..TRACE_VARS {
                        for node in 0..face.nodes {
                            per_cell.push(layout.resolve(face.edge, var, node));
                        }
                    }
                }
                per_cell
            })
            .collect();
        Self {
            mesh,
            prob,
            doping,
            layout,
            geoms,
            n_contacts,
            resolutions,
            solver: Mutex::new(SkeletonSolver::new()),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.mesh.cells.len()
    }

    /// Total unknowns: cell-local plus skeleton solve DoFs.
    pub fn dof_counts(&self) -> (usize, usize) {
        (
            self.geoms.iter().map(|g| g.nloc).sum(),
            self.layout.n_global,
        )
    }

    /// Gathers the cell-local trace vector for one cell.
    fn gather_trace(&self, traces: &[f64], cell: usize) -> Vec<f64> {
        let g = &self.geoms[cell];
        let mut out = Vec::with_capacity(g.ntr);
        for face in &g.faces {
            let off = self.layout.edge_offset[face.edge];
            out.extend_from_slice(&traces[off..off + TRACE_VARS * face.nodes]);
        }
        out
    }

    /// Equilibrium initial state: charge-neutral asinh guess refined by a
    /// cell-local HDG Poisson-Boltzmann solve (carriers eliminated through
    /// the Boltzmann relation), then carriers restored from the potential.
    ///
    /// The coupled Newton stalls when started from the raw neutral guess:
    /// the carrier equations begin at zero residual and any potential move
    /// excites them quadratically, so the line search cannot make progress.
    pub fn equilibrium_state(&self) -> DiscreteState {
        let nie = self.prob.n_ie;
        let n_star = self.prob.bases.n_star;
        let mut psi_cells: Vec<Vec<f64>> = self
            .geoms
            .iter()
            .map(|g| {
                g.node_um
                    .iter()
                    .map(|xu| equilibrium_potential(self.doping.eval(*xu) / n_star, nie))
                    .collect()
            })
            .collect();
        let mut psi_hat = vec![0.0; self.layout.trace_len / TRACE_VARS];
        let mut pe_offset = vec![0usize; self.mesh.edges.len()];
        let mut acc = 0;
        for (eid, &nodes) in self.layout.edge_nodes.iter().enumerate() {
            pe_offset[eid] = acc;
            acc += nodes;
        }
        for (eid, edge) in self.mesh.edges.iter().enumerate() {
            let nodes = self.layout.edge_nodes[eid];
            let enodes = lobatto_points(nodes - 1);
            for (k, &t) in enodes.iter().enumerate() {
                let x_um = if self.mesh.dim == 1 {
                    [edge.at, 0.0]
                } else {
                    let tangent = 1 - edge.axis;
                    let mut x = [0.0, 0.0];
                    x[edge.axis] = edge.at;
                    x[tangent] = edge.span[0] + 0.5 * (t + 1.0) * (edge.span[1] - edge.span[0]);
                    x
                };
                let nd = self.doping.eval(x_um) / n_star;
                psi_hat[pe_offset[eid] + k] = equilibrium_potential(nd, nie);
            }
        }
        // The equilibrium potential obeys a maximum principle; record the
        // charge-neutral range before the HDG solve so carrier exponentials
        // can be clipped against discrete overshoot at unresolved layers.
        let mut psi_lo = f64::MAX;
        let mut psi_hi = f64::MIN;
        for cell in &psi_cells {
            for &v in cell {
                psi_lo = psi_lo.min(v);
                psi_hi = psi_hi.max(v);
            }
        }
        let mut e_cells: Vec<Vec<f64>> = self
            .geoms
            .iter()
            .map(|g| vec![0.0; g.dim * g.s])
            .collect();
        self.poisson_boltzmann(&mut psi_cells, &mut e_cells, &mut psi_hat, &pe_offset);

        let boltz_n = |psi: f64| nie * (psi.clamp(psi_lo, psi_hi) / self.prob.v_n).exp();
        let boltz_p = |psi: f64| nie * (-psi.clamp(psi_lo, psi_hi) / self.prob.v_p).exp();
        let cells = self
            .geoms
            .iter()
            .enumerate()
            .map(|(c, g)| {
                let mut v = vec![0.0; g.nloc];
                for i in 0..g.s {
                    let psi = psi_cells[c][i];
                    v[g.off_psi() + i] = psi;
                    v[g.off_n() + i] = boltz_n(psi);
                    v[g.off_p() + i] = boltz_p(psi);
                }
                for m in 0..g.dim * g.s {
                    v[g.off_e() + m] = e_cells[c][m];
                }
                v
            })
            .collect();
        let mut traces = vec![0.0; self.layout.trace_len];
        for eid in 0..self.mesh.edges.len() {
            let nodes = self.layout.edge_nodes[eid];
            for k in 0..nodes {
                let psi = psi_hat[pe_offset[eid] + k];
                traces[self.layout.trace_index(eid, 0, k)] = psi;
                traces[self.layout.trace_index(eid, 1, k)] = boltz_n(psi);
                traces[self.layout.trace_index(eid, 2, k)] = boltz_p(psi);
            }
        }
        self.layout.refresh_slaves(&mut traces);
        DiscreteState { cells, traces }
    }

    /// Restricted Newton steps on the carrier unknowns (J_n, J_p, n, p and
    /// their traces) with psi, E and psi-hat frozen. The carrier subsystem
    /// is linear apart from recombination, so a few damped steps suffice;
    /// best effort (the coupled solve verifies convergence).
    pub fn carrier_relax(&self, state: &mut DiscreteState, bias: &[f64], max_iter: usize) {
        // Global numbering of carrier trace DoFs (vars 1 and 2).
        let mut cglobal = vec![usize::MAX; self.mesh.edges.len()];
        let mut n_global = 0;
        for (eid, &nodes) in self.layout.edge_nodes.iter().enumerate() {
            if self.layout.slave_weights[eid].is_none() {
                cglobal[eid] = n_global;
                n_global += 2 * nodes;
            }
        }
        // var: 0 -> n-hat, 1 -> p-hat within the carrier numbering.
        let resolve = |eid: usize, var: usize, k: usize| -> Vec<(usize, f64)> {
            let nodes = self.layout.edge_nodes[eid];
            match &self.layout.slave_weights[eid] {
                None => vec![(cglobal[eid] + var * nodes + k, 1.0)],
                Some((m, w)) => {
                    let mn = self.layout.edge_nodes[*m];
                    w[k].iter()
                        .enumerate()
                        .filter(|(_, wk)| wk.abs() > 0.0)
                        .map(|(j, wk)| (cglobal[*m] + var * mn + j, *wk))
                        .collect()
                }
            }
        };
        // Kept row/column indices per cell.
        let kept_local = |g: &CellGeom| -> Vec<usize> {
            let mut v = Vec::with_capacity(2 * g.dim * g.s + 2 * g.s);
            v.extend(g.off_jn()..g.off_jn() + g.dim * g.s);
            v.extend(g.off_jp()..g.off_jp() + g.dim * g.s);
            v.extend(g.off_n()..g.off_n() + g.s);
            v.extend(g.off_p()..g.off_p() + g.s);
            v
        };
        let kept_trace = |g: &CellGeom| -> Vec<usize> {
            let mut v = Vec::new();
            for f in &g.faces {
                for k in 0..2 * f.nodes {
                    v.push(f.trace_offset + f.nodes + k);
                }
            }
            v
        };
        let carrier_norm = |state: &DiscreteState| -> f64 {
            let results: Vec<CellAssembly> = par_map_collect(self.n_cells(), |c| {
                let geom = &self.geoms[c];
                let local = &state.cells[c];
                let trace = self.gather_trace(&state.traces, c);
                let tau = compute_tau(geom, &self.prob, local, &trace);
                assemble_cell(geom, &self.prob, local, &trace, bias, &tau, false)
            });
            let mut gres = vec![0.0; n_global];
            let mut norm = 0.0f64;
            for (c, out) in results.iter().enumerate() {
                let g = &self.geoms[c];
                for &i in &kept_local(g) {
                    norm = norm.max(out.res_local[i].abs());
                }
                for (fi, f) in g.faces.iter().enumerate() {
                    let _ = fi;
                    for var in 0..2 {
                        for k in 0..f.nodes {
                            let a = f.trace_offset + (var + 1) * f.nodes + k;
                            for (gi, w) in resolve(f.edge, var, k) {
                                gres[gi] += w * out.res_trace[a];
                            }
                        }
                    }
                }
            }
            for v in &gres {
                norm = norm.max(v.abs());
            }
            norm
        };

        let mut solver = SkeletonSolver::new();
        let mut res = carrier_norm(state);
        for _ in 0..max_iter {
            if res <= 1e-11 || !res.is_finite() {
                break;
            }
            let results: Vec<CellAssembly> = par_map_collect(self.n_cells(), |c| {
                let geom = &self.geoms[c];
                let local = &state.cells[c];
                let trace = self.gather_trace(&state.traces, c);
                let tau = compute_tau(geom, &self.prob, local, &trace);
                assemble_cell(geom, &self.prob, local, &trace, bias, &tau, true)
            });
            let mut triplets = Vec::new();
            let mut rhs = vec![0.0; n_global];
            let mut cond = Vec::with_capacity(results.len());
            let mut ok = true;
            for (c, out) in results.iter().enumerate() {
                let g = &self.geoms[c];
                let kl = kept_local(g);
                let kt = kept_trace(g);
                let jac = out.jac.as_ref().unwrap();
                let a = DMatrix::from_fn(kl.len(), kl.len(), |i, j| jac.a[(kl[i], kl[j])]);
                let b = DMatrix::from_fn(kl.len(), kt.len(), |i, j| jac.b[(kl[i], kt[j])]);
                let cc = DMatrix::from_fn(kt.len(), kl.len(), |i, j| jac.c[(kt[i], kl[j])]);
                let dd = DMatrix::from_fn(kt.len(), kt.len(), |i, j| jac.d[(kt[i], kt[j])]);
                let f = DVector::from_fn(kl.len(), |i, _| -out.res_local[kl[i]]);
                let gv = DVector::from_fn(kt.len(), |i, _| -out.res_trace[kt[i]]);
                let Ok(cell) = condense(c, a, &b, &cc, &dd, &f, &gv) else {
                    ok = false;
                    break;
                };
                let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
                for f in &g.faces {
                    for var in 0..2 {
                        for k in 0..f.nodes {
                            rows.push(resolve(f.edge, var, k));
                        }
                    }
                }
                for (ai, ra) in rows.iter().enumerate() {
                    for &(gi, wi) in ra {
                        rhs[gi] += wi * cell.rhs[ai];
                        for (bj, rb) in rows.iter().enumerate() {
                            let v = cell.schur[(ai, bj)];
                            if v != 0.0 {
                                for &(gj, wj) in rb {
                                    triplets.push((gi, gj, wi * wj * v));
                                }
                            }
                        }
                    }
                }
                cond.push((cell, rows, kl));
            }
            if !ok {
                break;
            }
            let Ok(delta_g) = solver.solve(n_global, &triplets, &rhs) else {
                break;
            };
            if delta_g.iter().any(|v| !v.is_finite()) {
                break;
            }
            let mut alpha = 1.0f64;
            let mut advanced = false;
            for _ in 0..20 {
                let mut trial = state.clone();
                for (c, (cell, rows, kl)) in cond.iter().enumerate() {
                    let mut dtr = DVector::<f64>::zeros(rows.len());
                    for (ai, ra) in rows.iter().enumerate() {
                        for &(gi, wi) in ra {
                            dtr[ai] += wi * delta_g[gi];
                        }
                    }
                    let du = cell.reconstruct(&dtr);
                    for (r, &orig) in kl.iter().enumerate() {
                        trial.cells[c][orig] += alpha * du[r];
                    }
                }
                for eid in 0..self.mesh.edges.len() {
                    if self.layout.slave_weights[eid].is_none() {
                        let nodes = self.layout.edge_nodes[eid];
                        for var in 0..2 {
                            for k in 0..nodes {
                                let idx = self.layout.trace_index(eid, var + 1, k);
                                trial.traces[idx] += alpha * delta_g[cglobal[eid] + var * nodes + k];
                            }
                        }
                    }
                }
                self.layout.refresh_slaves(&mut trial.traces);
                let rt = carrier_norm(&trial);
                if rt.is_finite() && rt < res {
                    *state = trial;
                    res = rt;
                    advanced = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !advanced {
                break;
            }
        }
    }

    /// Damped Newton on the equilibrium HDG Poisson system with Boltzmann
    /// carriers; best effort (the coupled solve verifies convergence).
    fn poisson_boltzmann(
        &self,
        psi_cells: &mut [Vec<f64>],
        e_cells: &mut [Vec<f64>],
        psi_hat: &mut [f64],
        pe_offset: &[usize],
    ) {
        let nie = self.prob.n_ie;
        let lam2 = self.prob.lambda_sq;
        let exp_c = |x: f64| x.min(690.0).exp();
        // Global numbering over non-slave edges, psi-hat only.
        let mut pglobal = vec![usize::MAX; self.mesh.edges.len()];
        let mut n_global = 0;
        for (eid, &nodes) in self.layout.edge_nodes.iter().enumerate() {
            if self.layout.slave_weights[eid].is_none() {
                pglobal[eid] = n_global;
                n_global += nodes;
            }
        }
        let resolve = |eid: usize, k: usize| -> Vec<(usize, f64)> {
            match &self.layout.slave_weights[eid] {
                None => vec![(pglobal[eid] + k, 1.0)],
                Some((m, w)) => w[k]
                    .iter()
                    .enumerate()
                    .filter(|(_, wk)| wk.abs() > 0.0)
                    .map(|(j, wk)| (pglobal[*m] + j, *wk))
                    .collect(),
            }
        };
        let refresh_slaves = |psi_hat: &mut [f64]| {
            for eid in 0..self.mesh.edges.len() {
                if let Some((m, w)) = &self.layout.slave_weights[eid] {
                    for k in 0..self.layout.edge_nodes[eid] {
                        let mut v = 0.0;
                        for (j, wk) in w[k].iter().enumerate() {
                            v += wk * psi_hat[pe_offset[*m] + j];
                        }
                        psi_hat[pe_offset[eid] + k] = v;
                    }
                }
            }
        };

        // One cell's residual and Jacobian for unknowns [E | psi | psi-hat].
        struct PbCell {
            res_local: DVector<f64>,
            res_trace: DVector<f64>,
            jac: Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)>,
        }
        let assemble = |c: usize,
                        psi_cells: &[Vec<f64>],
                        e_cells: &[Vec<f64>],
                        psi_hat: &[f64],
                        with_jac: bool|
         -> PbCell {
            let g = &self.geoms[c];
            let s = g.s;
            let d = g.dim;
            let nloc = (d + 1) * s;
            let ntr: usize = g.faces.iter().map(|f| f.nodes).sum();
            let mut res = DVector::<f64>::zeros(nloc);
            let mut rtr = DVector::<f64>::zeros(ntr);
            let mut a = with_jac.then(|| DMatrix::<f64>::zeros(nloc, nloc));
            let mut b = with_jac.then(|| DMatrix::<f64>::zeros(nloc, ntr));
            let mut cc = with_jac.then(|| DMatrix::<f64>::zeros(ntr, nloc));
            let mut dd = with_jac.then(|| DMatrix::<f64>::zeros(ntr, ntr));
            let off_psi = d * s;
            for q in 0..g.qw.len() {
                let w = g.qw[q];
                let mut psi_q = 0.0;
                let mut e_q = [0.0, 0.0];
                for i in 0..s {
                    psi_q += psi_cells[c][i] * g.qval[q][i];
                    for m in 0..d {
                        e_q[m] += e_cells[c][m * s + i] * g.qval[q][i];
                    }
                }
                let n_q = nie * exp_c(psi_q / self.prob.v_n);
                let p_q = nie * exp_c(-psi_q / self.prob.v_p);
                for i in 0..s {
                    let v = g.qval[q][i];
                    let gr = g.qgrad[q][i];
                    let ge: f64 = (0..d).map(|m| gr[m] * e_q[m]).sum();
                    res[off_psi + i] += w * (-lam2 * ge + v * (n_q - p_q - g.qdop[q]));
                    for m in 0..d {
                        res[m * s + i] += w * (v * e_q[m] - gr[m] * psi_q);
                    }
                    if let Some(a) = a.as_mut() {
                        let dnp = n_q / self.prob.v_n + p_q / self.prob.v_p;
                        for j in 0..s {
                            let vj = g.qval[q][j];
                            a[(off_psi + i, off_psi + j)] += w * v * dnp * vj;
                            for m in 0..d {
                                a[(off_psi + i, m * s + j)] -= w * lam2 * gr[m] * vj;
                                a[(m * s + i, m * s + j)] += w * v * vj;
                                a[(m * s + i, off_psi + j)] -= w * gr[m] * vj;
                            }
                        }
                    }
                }
            }
            let mut tof = 0;
            for face in &g.faces {
                let nodes = face.nodes;
                for q in 0..face.qw.len() {
                    let w = face.qw[q];
                    let mut psi_f = 0.0;
                    let mut en = 0.0;
                    for i in 0..s {
                        psi_f += psi_cells[c][i] * face.cval[q][i];
                        for m in 0..d {
                            en += e_cells[c][m * s + i] * face.cval[q][i] * face.normal[m];
                        }
                    }
                    let mut ph = 0.0;
                    for k in 0..nodes {
                        ph += psi_hat[pe_offset[face.edge] + k] * face.tval[q][k];
                    }
                    let ehat = en + TAU_PSI_PB * (psi_f - ph);
                    for i in 0..s {
                        let v = face.cval[q][i];
                        res[off_psi + i] += w * lam2 * v * ehat;
                        for m in 0..d {
                            res[m * s + i] += w * v * face.normal[m] * ph;
                        }
                        if let Some(a) = a.as_mut() {
                            let bmat = b.as_mut().unwrap();
                            for j in 0..s {
                                let vj = face.cval[q][j];
                                a[(off_psi + i, off_psi + j)] += w * lam2 * v * TAU_PSI_PB * vj;
                                for m in 0..d {
                                    a[(off_psi + i, m * s + j)] +=
                                        w * lam2 * v * vj * face.normal[m];
                                }
                            }
                            for k in 0..nodes {
                                let lam = face.tval[q][k];
                                bmat[(off_psi + i, tof + k)] -= w * lam2 * v * TAU_PSI_PB * lam;
                                for m in 0..d {
                                    bmat[(m * s + i, tof + k)] += w * v * face.normal[m] * lam;
                                }
                            }
                        }
                    }
                    match face.kind {
                        FaceKind::Transmission => {
                            for k in 0..nodes {
                                let lam = face.tval[q][k];
                                rtr[tof + k] += w * lam * ehat;
                                if let Some(cc) = cc.as_mut() {
                                    let dd = dd.as_mut().unwrap();
                                    for j in 0..s {
                                        let vj = face.cval[q][j];
                                        cc[(tof + k, off_psi + j)] += w * lam * TAU_PSI_PB * vj;
                                        for m in 0..d {
                                            cc[(tof + k, m * s + j)] +=
                                                w * lam * vj * face.normal[m];
                                        }
                                    }
                                    for l in 0..nodes {
                                        dd[(tof + k, tof + l)] -=
                                            w * lam * TAU_PSI_PB * face.tval[q][l];
                                    }
                                }
                            }
                        }
                        FaceKind::Dirichlet { .. } => {
                            let (g_psi, _, _) =
                                ohmic_contact_values(face.qdop[q], nie, 0.0);
                            for k in 0..nodes {
                                let lam = face.tval[q][k];
                                rtr[tof + k] += w * lam * (ph - g_psi);
                                if let Some(dd) = dd.as_mut() {
                                    for l in 0..nodes {
                                        dd[(tof + k, tof + l)] += w * lam * face.tval[q][l];
                                    }
                                }
                            }
                        }
                    }
                }
                tof += nodes;
            }
            PbCell {
                res_local: res,
                res_trace: rtr,
                jac: a.map(|a| (a, b.unwrap(), cc.unwrap(), dd.unwrap())),
            }
        };

        let residual_norm = |psi_cells: &[Vec<f64>], e_cells: &[Vec<f64>], psi_hat: &[f64]| {
            let outs: Vec<PbCell> = par_map_collect(self.n_cells(), |c| {
                assemble(c, psi_cells, e_cells, psi_hat, false)
            });
            let mut gres = vec![0.0; n_global];
            let mut norm = 0.0f64;
            for (c, out) in outs.iter().enumerate() {
                norm = norm.max(out.res_local.amax());
                let mut a = 0;
                for face in &self.geoms[c].faces {
                    for k in 0..face.nodes {
                        for (gidx, w) in resolve(face.edge, k) {
                            gres[gidx] += w * out.res_trace[a];
                        }
                        a += 1;
                    }
                }
            }
            for v in &gres {
                norm = norm.max(v.abs());
            }
            norm
        };

        let mut solver = SkeletonSolver::new();
        let mut res = residual_norm(psi_cells, e_cells, psi_hat);
        for _ in 0..80 {
            if res <= 1e-11 || !res.is_finite() {
                break;
            }
            let outs: Vec<PbCell> = par_map_collect(self.n_cells(), |c| {
                assemble(c, psi_cells, e_cells, psi_hat, true)
            });
            // Condense and fold.
            let mut triplets = Vec::new();
            let mut rhs = vec![0.0; n_global];
            let mut cond = Vec::with_capacity(outs.len());
            let mut ok = true;
            for (c, out) in outs.iter().enumerate() {
                let (a, b, cc, dd) = out.jac.as_ref().unwrap();
                let f = -&out.res_local;
                let gv = -&out.res_trace;
                let Ok(cell) = condense(c, a.clone(), b, cc, dd, &f, &gv) else {
                    ok = false;
                    break;
                };
                let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
                for face in &self.geoms[c].faces {
                    for k in 0..face.nodes {
                        rows.push(resolve(face.edge, k));
                    }
                }
                for (ai, ra) in rows.iter().enumerate() {
                    for &(gi, wi) in ra {
                        rhs[gi] += wi * cell.rhs[ai];
                        for (bj, rb) in rows.iter().enumerate() {
                            let v = cell.schur[(ai, bj)];
                            if v != 0.0 {
                                for &(gj, wj) in rb {
                                    triplets.push((gi, gj, wi * wj * v));
                                }
                            }
                        }
                    }
                }
                cond.push((cell, rows));
            }
            if !ok {
                break;
            }
            let Ok(delta_g) = solver.solve(n_global, &triplets, &rhs) else {
                break;
            };
            // Backtracking.
            let mut alpha = 1.0f64;
            let mut advanced = false;
            for _ in 0..30 {
                let mut tp = psi_cells.to_vec();
                let mut te = e_cells.to_vec();
                let mut th = psi_hat.to_vec();
                for (c, (cell, rows)) in cond.iter().enumerate() {
                    let mut dtr = DVector::<f64>::zeros(rows.len());
                    for (ai, ra) in rows.iter().enumerate() {
                        for &(gi, wi) in ra {
                            dtr[ai] += wi * delta_g[gi];
                        }
                    }
                    let du = cell.reconstruct(&dtr);
                    let g = &self.geoms[c];
                    for m in 0..g.dim * g.s {
                        te[c][m] += alpha * du[m];
                    }
                    for i in 0..g.s {
                        tp[c][i] += alpha * du[g.dim * g.s + i];
                    }
                }
                for eid in 0..self.mesh.edges.len() {
                    if self.layout.slave_weights[eid].is_none() {
                        for k in 0..self.layout.edge_nodes[eid] {
                            th[pe_offset[eid] + k] += alpha * delta_g[pglobal[eid] + k];
                        }
                    }
                }
                refresh_slaves(&mut th);
                let rt = residual_norm(&tp, &te, &th);
                if rt.is_finite() && rt < res {
                    for (dst, src) in psi_cells.iter_mut().zip(tp) {
                        *dst = src;
                    }
                    for (dst, src) in e_cells.iter_mut().zip(te) {
                        *dst = src;
                    }
                    psi_hat.copy_from_slice(&th);
                    res = rt;
                    advanced = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !advanced {
                break;
            }
        }
    }

    fn assemble_pass(
        &self,
        state: &DiscreteState,
        bias: &[f64],
        with_jacobian: bool,
    ) -> Result<(f64, Vec<CellAssembly>, Vec<f64>), SolveError> {
        assert_eq!(bias.len(), self.n_contacts, "bias vector length");
        let results: Vec<CellAssembly> = par_map_collect(self.n_cells(), |c| {
            let geom = &self.geoms[c];
            let local = &state.cells[c];
            let trace = self.gather_trace(&state.traces, c);
            let tau = compute_tau(geom, &self.prob, local, &trace);
            assemble_cell_opts(
                geom,
                &self.prob,
                local,
                &trace,
                bias,
                &tau,
                with_jacobian,
                true,
            )
        });
        // Fold per-cell trace residuals into the global rows; the folded
        // vector is the actual discrete system residual.
        let mut gres = vec![0.0; self.layout.n_global];
        let mut norm = 0.0f64;
        for (c, out) in results.iter().enumerate() {
            norm = norm.max(out.res_local.amax());
            for (a, &v) in out.res_trace.iter().enumerate() {
                for &(g, w) in &self.resolutions[c][a] {
                    gres[g] += w * v;
                }
            }
        }
        for v in &gres {
            norm = norm.max(v.abs());
        }
        Ok((norm, results, gres))
    }

    fn condense_all(
        &self,
        results: Vec<CellAssembly>,
    ) -> Result<Vec<CondensedCell>, SolveError> {
        let condensed: Vec<Result<CondensedCell, SolveError>> =
            par_map_collect(results.len(), |c| {
                let out = &results[c];
                let jac = out.jac.as_ref().expect("jacobian assembled");
                let f = -&out.res_local;
                let g = -&out.res_trace;
                condense(c, jac.a.clone(), &jac.b, &jac.c, &jac.d, &f, &g)
            });
        condensed.into_iter().collect()
    }

    fn solve_condensed(
        &self,
        condensed: &[CondensedCell],
    ) -> Result<Vec<f64>, SolveError> {
        let n = self.layout.n_global;
        let mut triplets = Vec::new();
        let mut rhs = vec![0.0; n];
        for (c, cc) in condensed.iter().enumerate() {
            let res = &self.resolutions[c];
            let ntr = cc.rhs.len();
            for a in 0..ntr {
                for &(ga, wa) in &res[a] {
                    rhs[ga] += wa * cc.rhs[a];
                    for bcol in 0..ntr {
                        let v = cc.schur[(a, bcol)];
                        if v != 0.0 {
                            for &(gb, wb) in &res[bcol] {
                                triplets.push((ga, gb, wa * wb * v));
                            }
                        }
                    }
                }
            }
        }
        let delta = self
            .solver
            .lock()
            .unwrap()
            .solve(n, &triplets, &rhs)?;
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite("skeleton solve"));
        }
        Ok(delta)
    }

    /// Builds the Newton direction from condensed cells and the global trace
    /// update.
    fn reconstruct_delta(
        &self,
        condensed: &[CondensedCell],
        delta_global: &[f64],
    ) -> DiscreteState {
        let traces = self.layout.expand(delta_global);
        let cells: Vec<Vec<f64>> = {
            let tr = &traces;
            par_map_collect(condensed.len(), move |c| {
                let local_tr = DVector::from_vec(self.gather_trace(tr, c));
                condensed[c].reconstruct(&local_tr).as_slice().to_vec()
            })
        };
        DiscreteState { cells, traces }
    }

    /// Dense assembly of the full uncondensed block system (test oracle).
    pub fn monolithic_matrix(
        &self,
        state: &DiscreteState,
        bias: &[f64],
    ) -> Result<(f64, DMatrix<f64>, DVector<f64>), SolveError> {
        let (norm, results, _) = self.assemble_pass(state, bias, true)?;
        let local_offsets: Vec<usize> = self
            .geoms
            .iter()
            .scan(0usize, |acc, g| {
                let o = *acc;
                *acc += g.nloc;
                Some(o)
            })
            .collect();
        let nloc_total: usize = self.geoms.iter().map(|g| g.nloc).sum();
        let n = nloc_total + self.layout.n_global;
        let mut mat = DMatrix::<f64>::zeros(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        for (c, out) in results.iter().enumerate() {
            let jac = out.jac.as_ref().unwrap();
            let lo = local_offsets[c];
            let res = &self.resolutions[c];
            let nloc = self.geoms[c].nloc;
            let ntr = self.geoms[c].ntr;
            for i in 0..nloc {
                rhs[lo + i] = -out.res_local[i];
                for j in 0..nloc {
                    mat[(lo + i, lo + j)] += jac.a[(i, j)];
                }
                for t in 0..ntr {
                    for &(g, w) in &res[t] {
                        mat[(lo + i, nloc_total + g)] += w * jac.b[(i, t)];
                    }
                }
            }
            for t in 0..ntr {
                for &(g, w) in &res[t] {
                    rhs[nloc_total + g] += -w * out.res_trace[t];
                    for j in 0..nloc {
                        mat[(nloc_total + g, lo + j)] += w * jac.c[(t, j)];
                    }
                    for t2 in 0..ntr {
                        for &(g2, w2) in &res[t2] {
                            mat[(nloc_total + g, nloc_total + g2)] += w * w2 * jac.d[(t, t2)];
                        }
                    }
                }
            }
        }
        Ok((norm, mat, rhs))
    }

    /// Assembles and solves the full uncondensed block system densely.
    ///
    /// Test oracle for the condensation path; only sensible on small meshes.
    pub fn monolithic_newton_step(
        &self,
        state: &DiscreteState,
        bias: &[f64],
    ) -> Result<(f64, DiscreteState), SolveError> {
        let (norm, mat, rhs) = self.monolithic_matrix(state, bias)?;
        let nloc_total: usize = self.geoms.iter().map(|g| g.nloc).sum();
        let local_offsets: Vec<usize> = self
            .geoms
            .iter()
            .scan(0usize, |acc, g| {
                let o = *acc;
                *acc += g.nloc;
                Some(o)
            })
            .collect();
        let sol = mat
            .lu()
            .solve(&rhs)
            .ok_or(SolveError::SkeletonFactorization("dense oracle".into()))?;
        let cells: Vec<Vec<f64>> = (0..self.n_cells())
            .map(|c| {
                let lo = local_offsets[c];
                sol.as_slice()[lo..lo + self.geoms[c].nloc].to_vec()
            })
            .collect();
        let global: Vec<f64> = sol.as_slice()[nloc_total..].to_vec();
        let traces = self.layout.expand(&global);
        Ok((norm, DiscreteState { cells, traces }))
    }

    /// Per-cell |oint J-hat . n ds - int R dx| for electrons and holes, the
    /// local conservation defect at the current state.
    pub fn conservation_defect(&self, state: &DiscreteState) -> (f64, f64) {
        let mut worst_n = 0.0f64;
        let mut worst_p = 0.0f64;
        for (c, geom) in self.geoms.iter().enumerate() {
            let local = &state.cells[c];
            let trace = self.gather_trace(&state.traces, c);
            let tau = compute_tau(geom, &self.prob, local, &trace);
            let s = geom.s;
            let (off_jn, off_jp) = (geom.off_jn(), geom.off_jp());
            let (off_n, off_p) = (geom.off_n(), geom.off_p());
            let mut flux_n = 0.0;
            let mut flux_p = 0.0;
            for (fidx, face) in geom.faces.iter().enumerate() {
                for q in 0..face.qw.len() {
                    let w = face.qw[q];
                    let mut n_f = 0.0;
                    let mut p_f = 0.0;
                    let mut jn_n = 0.0;
                    let mut jp_n = 0.0;
                    for i in 0..s {
                        let v = face.cval[q][i];
                        n_f += local[off_n + i] * v;
                        p_f += local[off_p + i] * v;
                        for m in 0..geom.dim {
                            jn_n += local[off_jn + m * s + i] * v * face.normal[m];
                            jp_n += local[off_jp + m * s + i] * v * face.normal[m];
                        }
                    }
                    let nodes = face.nodes;
                    let mut nh = 0.0;
                    let mut ph = 0.0;
                    for k in 0..nodes {
                        nh += trace[face.trace_offset + nodes + k] * face.tval[q][k];
                        ph += trace[face.trace_offset + 2 * nodes + k] * face.tval[q][k];
                    }
                    let (tn, tp) = tau.per_face[fidx][q];
                    flux_n += w * (jn_n + tn * (n_f - nh));
                    flux_p += w * (jp_n + tp * (p_f - ph));
                }
            }
            let mut r_int = 0.0;
            for q in 0..geom.qw.len() {
                let mut n_q = 0.0;
                let mut p_q = 0.0;
                for i in 0..s {
                    n_q += local[off_n + i] * geom.qval[q][i];
                    p_q += local[off_p + i] * geom.qval[q][i];
                }
                r_int += geom.qw[q] * self.prob.recombination(n_q, p_q).r;
            }
            worst_n = worst_n.max((flux_n - r_int).abs());
            worst_p = worst_p.max((flux_p + r_int).abs());
        }
        (worst_n, worst_p)
    }

    /// Field values at a point (um); on cell interfaces the lowest cell
    /// index wins.
    pub fn eval_at(&self, state: &DiscreteState, x_um: [f64; 2]) -> Option<FieldSample> {
        let cell = self.locate_cell(x_um)?;
        let geom = &self.geoms[cell];
        let c = &self.mesh.cells[cell];
        let basis = TensorBasis::new(geom.dim, geom.degree);
        let mut xi = [0.0, 0.0];
        for ax in 0..geom.dim {
            xi[ax] = 2.0 * (x_um[ax] - c.lo[ax]) / (c.hi[ax] - c.lo[ax]) - 1.0;
        }
        let local = &state.cells[cell];
        let s = geom.s;
        let mut out = FieldSample::default();
        for i in 0..s {
            let v = basis.value(i, xi);
            out.psi += local[geom.off_psi() + i] * v;
            out.n += local[geom.off_n() + i] * v;
            out.p += local[geom.off_p() + i] * v;
            for m in 0..geom.dim {
                out.e[m] += local[geom.off_e() + m * s + i] * v;
                out.jn[m] += local[geom.off_jn() + m * s + i] * v;
                out.jp[m] += local[geom.off_jp() + m * s + i] * v;
            }
        }
        Some(out)
    }

    fn locate_cell(&self, x: [f64; 2]) -> Option<usize> {
        let tol = 1e-12
            * (self.mesh.hi[0] - self.mesh.lo[0])
                .max(self.mesh.hi[1] - self.mesh.lo[1])
                .max(1.0);
        self.mesh.cells.iter().position(|c| {
            x[0] >= c.lo[0] - tol
                && x[0] <= c.hi[0] + tol
                && (self.mesh.dim == 1 || (x[1] >= c.lo[1] - tol && x[1] <= c.hi[1] + tol))
        })
    }

    /// Extrema of the carrier fields over all volume quadrature points, for
    /// the oscillation classifier.
    pub fn carrier_extrema(&self, state: &DiscreteState) -> CarrierExtrema {
        let mut ex = CarrierExtrema::default();
        for (c, geom) in self.geoms.iter().enumerate() {
            let local = &state.cells[c];
            for q in 0..geom.qw.len() {
                let mut n_q = 0.0;
                let mut p_q = 0.0;
                let mut psi_q = 0.0;
                for i in 0..geom.s {
                    let v = geom.qval[q][i];
                    n_q += local[geom.off_n() + i] * v;
                    p_q += local[geom.off_p() + i] * v;
                    psi_q += local[geom.off_psi() + i] * v;
                }
                ex.min_n = ex.min_n.min(n_q);
                ex.max_n = ex.max_n.max(n_q);
                ex.min_p = ex.min_p.min(p_q);
                ex.max_p = ex.max_p.max(p_q);
                ex.min_psi = ex.min_psi.min(psi_q);
                ex.max_psi = ex.max_psi.max(psi_q);
            }
        }
        ex
    }

    /// L2 norm of a field gradient per cell: `grad_psi` uses the auxiliary
    /// field -E, `grad_n` the carrier polynomial gradient, `grad_doping` the
    /// analytic profile gradient.
    pub fn cell_gradient_norms(
        &self,
        state: Option<&DiscreteState>,
        which: GradField,
    ) -> Vec<f64> {
        let n_star = self.prob.bases.n_star;
        let x_star_um = self.prob.bases.x_star_um();
        self.geoms
            .iter()
            .enumerate()
            .map(|(c, geom)| {
                let mut acc = 0.0;
                for q in 0..geom.qw.len() {
                    let mut g2 = 0.0;
                    match which {
                        GradField::Psi => {
                            let local = &state.expect("state required").cells[c];
                            for m in 0..geom.dim {
                                let mut e = 0.0;
                                for i in 0..geom.s {
                                    e += local[geom.off_e() + m * geom.s + i] * geom.qval[q][i];
                                }
                                g2 += e * e;
                            }
                        }
                        GradField::N => {
                            let local = &state.expect("state required").cells[c];
                            for m in 0..geom.dim {
                                let mut d = 0.0;
                                for i in 0..geom.s {
                                    d += local[geom.off_n() + i] * geom.qgrad[q][i][m];
                                }
                                g2 += d * d;
                            }
                        }
                        GradField::Doping => {
                            let cell = &self.mesh.cells[c];
                            let h = 0.25
                                * (cell.hi[0] - cell.lo[0])
                                    .min(if geom.dim == 2 {
                                        cell.hi[1] - cell.lo[1]
                                    } else {
                                        f64::MAX
                                    });
                            let grad_um = self.doping.gradient(geom.q_um[q], h);
                            for m in 0..geom.dim {
                                let gs = grad_um[m] * x_star_um / n_star;
                                g2 += gs * gs;
                            }
                        }
                    }
                    acc += geom.qw[q] * g2;
                }
                acc.sqrt()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradField {
    Psi,
    N,
    Doping,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FieldSample {
    pub psi: f64,
    pub n: f64,
    pub p: f64,
    pub e: [f64; 2],
    pub jn: [f64; 2],
    pub jp: [f64; 2],
}

#[derive(Debug, Clone, Copy)]
pub struct CarrierExtrema {
    pub min_n: f64,
    pub max_n: f64,
    pub min_p: f64,
    pub max_p: f64,
    pub min_psi: f64,
    pub max_psi: f64,
}

impl Default for CarrierExtrema {
    fn default() -> Self {
        Self {
            min_n: f64::MAX,
            max_n: f64::MIN,
            min_p: f64::MAX,
            max_p: f64::MIN,
            min_psi: f64::MAX,
            max_psi: f64::MIN,
        }
    }
}

impl Discretization for HdgSystem {
    type State = DiscreteState;

    fn residual_norm(&self, state: &Self::State, bias: &[f64]) -> Result<f64, SolveError> {
        let (norm, _, _) = self.assemble_pass(state, bias, false)?;
        Ok(norm)
    }

    fn newton_step(
        &self,
        state: &Self::State,
        bias: &[f64],
    ) -> Result<(f64, Self::State), SolveError> {
        let (norm, results, _) = self.assemble_pass(state, bias, true)?;
        let condensed = self.condense_all(results)?;
        let delta_global = self.solve_condensed(&condensed)?;
        let delta = self.reconstruct_delta(&condensed, &delta_global);
        Ok((norm, delta))
    }

    fn apply_step(&self, state: &mut Self::State, delta: &Self::State, alpha: f64) {
        for (s, d) in state.cells.iter_mut().zip(&delta.cells) {
            for (a, b) in s.iter_mut().zip(d) {
                *a += alpha * b;
            }
        }
        for (a, b) in state.traces.iter_mut().zip(&delta.traces) {
            *a += alpha * b;
        }
        self.layout.refresh_slaves(&mut state.traces);
    }

    fn max_rel_step(
        &self,
        state: &Self::State,
        delta: &Self::State,
        alpha: f64,
        eps_abs_psi: f64,
    ) -> f64 {
        let eps_carrier = self.prob.n_ie;
        let mut worst = 0.0f64;
        for (c, geom) in self.geoms.iter().enumerate() {
            let s = geom.s;
            for i in 0..s {
                let idx_psi = geom.off_psi() + i;
                let idx_n = geom.off_n() + i;
                let idx_p = geom.off_p() + i;
                worst = worst.max(
                    (alpha * delta.cells[c][idx_psi]).abs()
                        / (state.cells[c][idx_psi].abs() + eps_abs_psi),
                );
                worst = worst.max(
                    (alpha * delta.cells[c][idx_n]).abs()
                        / (state.cells[c][idx_n].abs() + eps_carrier),
                );
                worst = worst.max(
                    (alpha * delta.cells[c][idx_p]).abs()
                        / (state.cells[c][idx_p].abs() + eps_carrier),
                );
            }
        }
        for (eid, &nodes) in self.layout.edge_nodes.iter().enumerate() {
            for var in 0..TRACE_VARS {
                let eps = if var == 0 { eps_abs_psi } else { eps_carrier };
                for k in 0..nodes {
                    let idx = self.layout.trace_index(eid, var, k);
                    worst = worst
                        .max((alpha * delta.traces[idx]).abs() / (state.traces[idx].abs() + eps));
                }
            }
        }
        worst
    }

    fn clamp_carriers(&self, state: &mut Self::State) {
        for (c, geom) in self.geoms.iter().enumerate() {
            for i in 0..geom.s {
                let idx_n = geom.off_n() + i;
                let idx_p = geom.off_p() + i;
                state.cells[c][idx_n] = state.cells[c][idx_n].max(0.0);
                state.cells[c][idx_p] = state.cells[c][idx_p].max(0.0);
            }
        }
        for (eid, &nodes) in self.layout.edge_nodes.iter().enumerate() {
            if matches!(self.mesh.edges[eid].kind, EdgeKind::Slave { .. }) {
                continue;
            }
            for var in 1..TRACE_VARS {
                for k in 0..nodes {
                    let idx = self.layout.trace_index(eid, var, k);
                    state.traces[idx] = state.traces[idx].max(0.0);
                }
            }
        }
        self.layout.refresh_slaves(&mut state.traces);
    }

    fn carrier_abs_floor(&self) -> f64 {
        self.prob.n_ie
    }

    /// Contact current integrals from the numerical-flux traces: only the
    /// traces are locally conservative, so raw interior fields are not used.
    fn contact_flux_integrals(&self, state: &Self::State) -> Vec<f64> {
        let mut out = vec![0.0; self.n_contacts];
        for (c, geom) in self.geoms.iter().enumerate() {
            let has_contact = geom
                .faces
                .iter()
                .any(|f| matches!(f.kind, FaceKind::Dirichlet { .. }));
            if !has_contact {
                continue;
            }
            let local = &state.cells[c];
            let trace = self.gather_trace(&state.traces, c);
            let tau = compute_tau(geom, &self.prob, local, &trace);
            let s = geom.s;
            for (fidx, face) in geom.faces.iter().enumerate() {
                let FaceKind::Dirichlet { contact } = face.kind else {
                    continue;
                };
                for q in 0..face.qw.len() {
                    let w = face.qw[q];
                    let mut n_f = 0.0;
                    let mut p_f = 0.0;
                    let mut jn_n = 0.0;
                    let mut jp_n = 0.0;
                    for i in 0..s {
                        let v = face.cval[q][i];
                        n_f += local[geom.off_n() + i] * v;
                        p_f += local[geom.off_p() + i] * v;
                        for m in 0..geom.dim {
                            jn_n += local[geom.off_jn() + m * s + i] * v * face.normal[m];
                            jp_n += local[geom.off_jp() + m * s + i] * v * face.normal[m];
                        }
                    }
                    let nodes = face.nodes;
                    let mut nh = 0.0;
                    let mut ph = 0.0;
                    for k in 0..nodes {
                        nh += trace[face.trace_offset + nodes + k] * face.tval[q][k];
                        ph += trace[face.trace_offset + 2 * nodes + k] * face.tval[q][k];
                    }
                    let (tn, tp) = tau.per_face[fidx][q];
                    out[contact] += w * ((jn_n + tn * (n_f - nh)) + (jp_n + tp * (p_f - ph)));
                }
            }
        }
        out
    }
}
