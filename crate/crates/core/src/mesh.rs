//! Interval and axis-aligned quadrilateral meshes with one-irregular
//! refinement, hanging-node constraints and per-cell scheme tags.
//!
//! Edges (skeleton faces) are re-derived from the cell rectangles after
//! every structural change by exact face matching; refinement midpoints are
//! computed once per split so shared coordinates compare bit-equal.

use crate::basis::{lagrange_value, lobatto_points};
use crate::device::ContactSpec;
use crate::error::ConfigError;
use serde::{Deserialize, Serialize};

pub type CellId = usize;
pub type EdgeId = usize;

/// Discretization assigned to a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemeTag {
    /// Harmonic-averaging carrier equations; always degree 1.
    Ha,
    /// Conventional HDG of the given polynomial degree (1..=3).
    Conventional(u8),
}

impl SchemeTag {
    pub fn degree(self) -> u8 {
        match self {
            SchemeTag::Ha => 1,
            SchemeTag::Conventional(p) => p,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub level: u32,
    pub scheme: SchemeTag,
    /// Edge ids in face order: 1D `[left, right]`, 2D `[S, E, N, W]`.
    pub edges: Vec<EdgeId>,
}

impl Cell {
    pub fn centroid(&self) -> [f64; 2] {
        [0.5 * (self.lo[0] + self.hi[0]), 0.5 * (self.lo[1] + self.hi[1])]
    }

    pub fn extent(&self) -> [f64; 2] {
        [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Interior,
    Neumann,
    Dirichlet { contact: usize },
    /// Coarse side of a hanging face; carries the skeleton unknowns.
    Master,
    /// Fine-side half face; its trace DoFs interpolate the master's.
    Slave { master: EdgeId },
}

#[derive(Debug, Clone)]
pub struct Edge {
    /// Axis of the edge normal (0: vertical line x = at, 1: horizontal).
    pub axis: usize,
    /// Coordinate along the normal axis (um).
    pub at: f64,
    /// Tangential interval (um); `span[0] == span[1]` for 1D point edges.
    pub span: [f64; 2],
    /// Adjacent cells: `cells[0]` on the lower-coordinate side (outward
    /// normal +axis there), `cells[1]` on the upper side.
    pub cells: [Option<CellId>; 2],
    pub degree: u8,
    pub kind: EdgeKind,
}

impl Edge {
    pub fn length(&self) -> f64 {
        self.span[1] - self.span[0]
    }

    /// Outward normal sign for the given cell: +1 when the cell sits on the
    /// lower-coordinate side.
    pub fn normal_sign(&self, cell: CellId) -> f64 {
        if self.cells[0] == Some(cell) {
            1.0
        } else {
            -1.0
        }
    }

    pub fn is_boundary(&self) -> bool {
        matches!(self.kind, EdgeKind::Neumann | EdgeKind::Dirichlet { .. })
    }

    pub fn midpoint(&self) -> [f64; 2] {
        let t = 0.5 * (self.span[0] + self.span[1]);
        if self.axis == 0 {
            [self.at, t]
        } else {
            [t, self.at]
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub dim: usize,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub cells: Vec<Cell>,
    pub edges: Vec<Edge>,
    pub contacts: Vec<ContactSpec>,
}

struct Face {
    axis: usize,
    at: f64,
    span: [f64; 2],
    cell: CellId,
    /// True when the cell lies on the lower-coordinate side of the face.
    lower_side: bool,
}

impl Mesh {
    /// Uniform 1D interval mesh with `n` cells.
    pub fn uniform_1d(
        lo: f64,
        hi: f64,
        n: usize,
        contacts: &[ContactSpec],
    ) -> Result<Self, ConfigError> {
        if !(hi > lo) || n == 0 {
            return Err(ConfigError::DegenerateDomain(format!(
                "1d domain [{lo}, {hi}] with {n} cells"
            )));
        }
        let h = (hi - lo) / n as f64;
        let cells = (0..n)
            .map(|i| Cell {
                lo: [lo + i as f64 * h, 0.0],
                hi: [lo + (i + 1) as f64 * h, 0.0],
                level: 0,
                scheme: SchemeTag::Conventional(1),
                edges: Vec::new(),
            })
            .collect();
        let mut mesh = Self {
            dim: 1,
            lo: [lo, 0.0],
            hi: [hi, 0.0],
            cells,
            edges: Vec::new(),
            contacts: contacts.to_vec(),
        };
        mesh.rebuild_edges()?;
        Ok(mesh)
    }

    /// Uniform tensor mesh of `nx` by `ny` axis-aligned rectangles.
    pub fn uniform_2d(
        lo: [f64; 2],
        hi: [f64; 2],
        nx: usize,
        ny: usize,
        contacts: &[ContactSpec],
    ) -> Result<Self, ConfigError> {
        if !(hi[0] > lo[0]) || !(hi[1] > lo[1]) || nx == 0 || ny == 0 {
            return Err(ConfigError::DegenerateDomain(format!(
                "2d domain [{:?}, {:?}] with {nx}x{ny} cells",
                lo, hi
            )));
        }
        let hx = (hi[0] - lo[0]) / nx as f64;
        let hy = (hi[1] - lo[1]) / ny as f64;
        let mut cells = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                cells.push(Cell {
                    lo: [lo[0] + i as f64 * hx, lo[1] + j as f64 * hy],
                    hi: [lo[0] + (i + 1) as f64 * hx, lo[1] + (j + 1) as f64 * hy],
                    level: 0,
                    scheme: SchemeTag::Conventional(1),
                    edges: Vec::new(),
                });
            }
        }
        let mut mesh = Self {
            dim: 2,
            lo,
            hi,
            cells,
            edges: Vec::new(),
            contacts: contacts.to_vec(),
        };
        mesh.rebuild_edges()?;
        Ok(mesh)
    }

    /// Splits every cell in `marked` (plus closure so the result stays
    /// one-irregular) into 2 (1D) or 4 (2D) children.
    pub fn refine(&self, marked: &[CellId]) -> Result<Self, ConfigError> {
        let mut split = vec![false; self.cells.len()];
        for &c in marked {
            split[c] = true;
        }
        // Closure: a split raises the level by one; neighbors may differ by
        // at most one level afterwards.
        let pairs = self.adjacent_pairs();
        loop {
            let mut changed = false;
            for &(a, b) in &pairs {
                let la = self.cells[a].level + split[a] as u32;
                let lb = self.cells[b].level + split[b] as u32;
                if la > lb + 1 && !split[b] {
                    split[b] = true;
                    changed = true;
                } else if lb > la + 1 && !split[a] {
                    split[a] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        let mut cells = Vec::new();
        for (id, cell) in self.cells.iter().enumerate() {
            if !split[id] {
                cells.push(Cell {
                    edges: Vec::new(),
                    ..cell.clone()
                });
                continue;
            }
            let mid = [0.5 * (cell.lo[0] + cell.hi[0]), 0.5 * (cell.lo[1] + cell.hi[1])];
            let child = |lo: [f64; 2], hi: [f64; 2]| Cell {
                lo,
                hi,
                level: cell.level + 1,
                scheme: cell.scheme,
                edges: Vec::new(),
            };
            if self.dim == 1 {
                cells.push(child(cell.lo, [mid[0], 0.0]));
                cells.push(child([mid[0], 0.0], cell.hi));
            } else {
                cells.push(child(cell.lo, mid));
                cells.push(child([mid[0], cell.lo[1]], [cell.hi[0], mid[1]]));
                cells.push(child([cell.lo[0], mid[1]], [mid[0], cell.hi[1]]));
                cells.push(child(mid, cell.hi));
            }
        }
        let mut mesh = Self {
            dim: self.dim,
            lo: self.lo,
            hi: self.hi,
            cells,
            edges: Vec::new(),
            contacts: self.contacts.clone(),
        };
        mesh.rebuild_edges()?;
        Ok(mesh)
    }

    /// Replaces per-cell scheme tags and refreshes the per-edge degrees.
    pub fn assign_schemes(&mut self, tags: &[SchemeTag]) -> Result<(), ConfigError> {
        assert_eq!(tags.len(), self.cells.len());
        for (cell, &tag) in self.cells.iter_mut().zip(tags) {
            if let SchemeTag::Conventional(p) = tag {
                if !(1..=3).contains(&p) {
                    return Err(ConfigError::Invalid {
                        path: "scheme".into(),
                        message: format!("conventional degree {p} outside 1..=3"),
                    });
                }
            }
            cell.scheme = tag;
        }
        self.recompute_edge_degrees();
        Ok(())
    }

    fn adjacent_pairs(&self) -> Vec<(CellId, CellId)> {
        let mut pairs = Vec::new();
        for edge in &self.edges {
            match edge.kind {
                EdgeKind::Interior => {
                    pairs.push((edge.cells[0].unwrap(), edge.cells[1].unwrap()));
                }
                EdgeKind::Slave { master } => {
                    let fine = edge.cells[0].or(edge.cells[1]).unwrap();
                    let coarse = self.edges[master].cells[0]
                        .or(self.edges[master].cells[1])
                        .unwrap();
                    pairs.push((fine, coarse));
                }
                _ => {}
            }
        }
        pairs
    }

    fn rebuild_edges(&mut self) -> Result<(), ConfigError> {
        if self.dim == 1 {
            self.rebuild_edges_1d()?;
        } else {
            self.rebuild_edges_2d()?;
        }
        self.recompute_edge_degrees();
        Ok(())
    }

    fn rebuild_edges_1d(&mut self) -> Result<(), ConfigError> {
        use std::collections::HashMap;
        let mut groups: HashMap<u64, Vec<(CellId, bool)>> = HashMap::new();
        for (id, cell) in self.cells.iter().enumerate() {
            groups.entry(cell.lo[0].to_bits()).or_default().push((id, false));
            groups.entry(cell.hi[0].to_bits()).or_default().push((id, true));
        }
        let mut edges = Vec::new();
        let mut keys: Vec<u64> = groups.keys().copied().collect();
        keys.sort_by(|a, b| f64::from_bits(*a).partial_cmp(&f64::from_bits(*b)).unwrap());
        for key in keys {
            let at = f64::from_bits(key);
            let members = &groups[&key];
            let lower = members.iter().find(|(_, is_hi)| *is_hi).map(|(c, _)| *c);
            let upper = members.iter().find(|(_, is_hi)| !*is_hi).map(|(c, _)| *c);
            let kind = match (lower, upper) {
                (Some(_), Some(_)) => EdgeKind::Interior,
                _ => self.boundary_kind(0, at, [at, at])?,
            };
            edges.push(Edge {
                axis: 0,
                at,
                span: [at, at],
                cells: [lower, upper],
                degree: 1,
                kind,
            });
        }
        self.attach_edges(edges);
        Ok(())
    }

    fn rebuild_edges_2d(&mut self) -> Result<(), ConfigError> {
        use std::collections::HashMap;
        let mut groups: HashMap<(usize, u64), Vec<Face>> = HashMap::new();
        for (id, cell) in self.cells.iter().enumerate() {
            let faces = [
                // South and north faces: normal axis 1.
                Face { axis: 1, at: cell.lo[1], span: [cell.lo[0], cell.hi[0]], cell: id, lower_side: false },
                Face { axis: 1, at: cell.hi[1], span: [cell.lo[0], cell.hi[0]], cell: id, lower_side: true },
                // West and east faces: normal axis 0.
                Face { axis: 0, at: cell.lo[0], span: [cell.lo[1], cell.hi[1]], cell: id, lower_side: false },
                Face { axis: 0, at: cell.hi[0], span: [cell.lo[1], cell.hi[1]], cell: id, lower_side: true },
            ];
            for f in faces {
                groups.entry((f.axis, f.at.to_bits())).or_default().push(f);
            }
        }
        let mut edges: Vec<Edge> = Vec::new();
        let mut keys: Vec<(usize, u64)> = groups.keys().copied().collect();
        keys.sort_by(|a, b| {
            (a.0, f64::from_bits(a.1))
                .partial_cmp(&(b.0, f64::from_bits(b.1)))
                .unwrap()
        });
        for key in keys {
            let group = &groups[&key];
            let (axis, at) = (key.0, f64::from_bits(key.1));
            let mut lower: Vec<&Face> = group.iter().filter(|f| f.lower_side).collect();
            let mut upper: Vec<&Face> = group.iter().filter(|f| !f.lower_side).collect();
            lower.sort_by(|a, b| a.span[0].partial_cmp(&b.span[0]).unwrap());
            upper.sort_by(|a, b| a.span[0].partial_cmp(&b.span[0]).unwrap());
            if lower.is_empty() || upper.is_empty() {
                for f in lower.iter().chain(upper.iter()) {
                    let kind = self.boundary_kind(axis, at, f.span)?;
                    let cells = if f.lower_side {
                        [Some(f.cell), None]
                    } else {
                        [None, Some(f.cell)]
                    };
                    edges.push(Edge { axis, at, span: f.span, cells, degree: 1, kind });
                }
                continue;
            }
            let (mut i, mut j) = (0, 0);
            while i < lower.len() && j < upper.len() {
                let b = lower[i];
                let a = upper[j];
                debug_assert_eq!(b.span[0].to_bits(), a.span[0].to_bits(), "face walk desync");
                if b.span[1] == a.span[1] {
                    edges.push(Edge {
                        axis,
                        at,
                        span: b.span,
                        cells: [Some(b.cell), Some(a.cell)],
                        degree: 1,
                        kind: EdgeKind::Interior,
                    });
                    i += 1;
                    j += 1;
                } else if b.span[1] > a.span[1] {
                    // Coarse face below, two fine half-faces above.
                    let a2 = upper[j + 1];
                    let master = edges.len();
                    edges.push(Edge {
                        axis,
                        at,
                        span: b.span,
                        cells: [Some(b.cell), None],
                        degree: 1,
                        kind: EdgeKind::Master,
                    });
                    edges.push(Edge {
                        axis,
                        at,
                        span: a.span,
                        cells: [None, Some(a.cell)],
                        degree: 1,
                        kind: EdgeKind::Slave { master },
                    });
                    edges.push(Edge {
                        axis,
                        at,
                        span: a2.span,
                        cells: [None, Some(a2.cell)],
                        degree: 1,
                        kind: EdgeKind::Slave { master },
                    });
                    i += 1;
                    j += 2;
                } else {
                    let b2 = lower[i + 1];
                    let master = edges.len();
                    edges.push(Edge {
                        axis,
                        at,
                        span: a.span,
                        cells: [None, Some(a.cell)],
                        degree: 1,
                        kind: EdgeKind::Master,
                    });
                    edges.push(Edge {
                        axis,
                        at,
                        span: b.span,
                        cells: [Some(b.cell), None],
                        degree: 1,
                        kind: EdgeKind::Slave { master },
                    });
                    edges.push(Edge {
                        axis,
                        at,
                        span: b2.span,
                        cells: [Some(b2.cell), None],
                        degree: 1,
                        kind: EdgeKind::Slave { master },
                    });
                    i += 2;
                    j += 1;
                }
            }
        }
        self.attach_edges(edges);
        Ok(())
    }

    fn attach_edges(&mut self, edges: Vec<Edge>) {
        for cell in &mut self.cells {
            cell.edges.clear();
        }
        self.edges = edges;
        // Cells reference their own faces: a coarse cell references the
        // master long edge, a fine cell its slave half-edge.
        let mut by_cell: Vec<Vec<(usize, EdgeId)>> = vec![Vec::new(); self.cells.len()];
        for (eid, edge) in self.edges.iter().enumerate() {
            for side in 0..2 {
                if let Some(c) = edge.cells[side] {
                    by_cell[c].push((Self::face_slot(self.dim, edge, side), eid));
                }
            }
        }
        for (cell, mut faces) in self.cells.iter_mut().zip(by_cell) {
            faces.sort();
            cell.edges = faces.into_iter().map(|(_, e)| e).collect();
        }
    }

    /// Face ordering slot: 1D [left, right]; 2D [S, E, N, W].
    fn face_slot(dim: usize, edge: &Edge, side: usize) -> usize {
        if dim == 1 {
            // side 0 means the cell is left of the point: edge is its right face.
            return if side == 0 { 1 } else { 0 };
        }
        match (edge.axis, side) {
            (1, 0) => 2, // cell below a horizontal edge: north face
            (1, 1) => 0, // cell above: south face
            (0, 0) => 1, // cell left of a vertical edge: east face
            _ => 3,      // west face
        }
    }

    fn boundary_kind(&self, axis: usize, at: f64, span: [f64; 2]) -> Result<EdgeKind, ConfigError> {
        let tol = 1e-9
            * (self.hi[0] - self.lo[0])
                .max(self.hi[1] - self.lo[1])
                .max(1.0);
        for contact in &self.contacts {
            for seg in &contact.segments {
                if seg.normal_axis != axis || (seg.at_um - at).abs() > tol {
                    continue;
                }
                let inside =
                    span[0] >= seg.from_um - tol && span[1] <= seg.to_um + tol;
                let outside = span[1] <= seg.from_um + tol || span[0] >= seg.to_um - tol;
                if inside {
                    return Ok(EdgeKind::Dirichlet { contact: contact.id });
                }
                if !outside {
                    return Err(ConfigError::Invalid {
                        path: format!("contacts.{}", contact.name),
                        message: format!(
                            "contact boundary [{}, {}] does not align with mesh edge [{}, {}]",
                            seg.from_um, seg.to_um, span[0], span[1]
                        ),
                    });
                }
            }
        }
        Ok(EdgeKind::Neumann)
    }

    fn recompute_edge_degrees(&mut self) {
        let cell_deg: Vec<u8> = self.cells.iter().map(|c| c.scheme.degree()).collect();
        let n = self.edges.len();
        let mut degrees = vec![1u8; n];
        for (eid, edge) in self.edges.iter().enumerate() {
            let mut d = 1;
            for side in 0..2 {
                if let Some(c) = edge.cells[side] {
                    d = d.max(cell_deg[c]);
                }
            }
            degrees[eid] = d;
        }
        // Hanging groups share one trace: take the max over master + slaves.
        for eid in 0..n {
            if let EdgeKind::Slave { master } = self.edges[eid].kind {
                let d = degrees[eid].max(degrees[master]);
                degrees[eid] = d;
                degrees[master] = degrees[master].max(d);
            }
        }
        for eid in 0..n {
            if let EdgeKind::Slave { master } = self.edges[eid].kind {
                degrees[eid] = degrees[master];
            }
        }
        for (edge, d) in self.edges.iter_mut().zip(degrees) {
            edge.degree = d;
        }
    }

    /// Structural invariants: incidence counts, one-irregularity, constraint
    /// acyclicity, slave containment and degree consistency.
    pub fn audit(&self) -> Result<(), String> {
        for (eid, edge) in self.edges.iter().enumerate() {
            let n_cells = edge.cells.iter().flatten().count();
            let expect = match edge.kind {
                EdgeKind::Interior => 2,
                _ => 1,
            };
            if n_cells != expect {
                return Err(format!("edge {eid}: {n_cells} cells, expected {expect}"));
            }
            if let EdgeKind::Slave { master } = edge.kind {
                let m = &self.edges[master];
                if !matches!(m.kind, EdgeKind::Master) {
                    return Err(format!("edge {eid}: master {master} is not a master edge"));
                }
                if edge.span[0] < m.span[0] - 1e-12 || edge.span[1] > m.span[1] + 1e-12 {
                    return Err(format!("edge {eid}: span outside master {master}"));
                }
                if edge.degree != m.degree {
                    return Err(format!("edge {eid}: degree differs from master"));
                }
            }
        }
        for (a, b) in self.adjacent_pairs() {
            let (la, lb) = (self.cells[a].level, self.cells[b].level);
            if la.abs_diff(lb) > 1 {
                return Err(format!("cells {a} (level {la}) and {b} (level {lb}) break one-irregularity"));
            }
        }
        let expected_faces = if self.dim == 1 { 2 } else { 4 };
        for (cid, cell) in self.cells.iter().enumerate() {
            if cell.edges.len() != expected_faces {
                return Err(format!("cell {cid}: {} faces, expected {expected_faces}", cell.edges.len()));
            }
            for &eid in &cell.edges {
                if self.edges[eid].cells.iter().all(|c| *c != Some(cid)) {
                    return Err(format!("cell {cid} references edge {eid} which does not reference it"));
                }
            }
            let deg = cell.scheme.degree();
            for &eid in &cell.edges {
                if self.edges[eid].degree < deg {
                    return Err(format!("edge {eid} degree below adjacent cell {cid}"));
                }
            }
        }
        Ok(())
    }
}

/// Skeleton DoF numbering with hanging-node constraint weights.
///
/// Each edge owns `3 * nodes` trace coefficients (psi-hat, n-hat, p-hat on
/// Lobatto nodes of the edge). The "full" numbering covers every edge
/// including slaves; the "global" numbering covers only non-slave edges and
/// is what the linear solver sees.
#[derive(Debug, Clone)]
pub struct SkeletonLayout {
    pub edge_nodes: Vec<usize>,
    pub edge_offset: Vec<usize>,
    pub trace_len: usize,
    pub global_offset: Vec<Option<usize>>,
    pub n_global: usize,
    /// For each slave edge: (master id, weights\[slave_node\]\[master_node\]).
    pub slave_weights: Vec<Option<(EdgeId, Vec<Vec<f64>>)>>,
}

pub const TRACE_VARS: usize = 3;

impl SkeletonLayout {
    pub fn new(mesh: &Mesh) -> Self {
        let n = mesh.edges.len();
        let mut edge_nodes = Vec::with_capacity(n);
        let mut edge_offset = Vec::with_capacity(n);
        let mut global_offset = Vec::with_capacity(n);
        let mut trace_len = 0;
        let mut n_global = 0;
        for edge in &mesh.edges {
            let nodes = if mesh.dim == 1 {
                1
            } else {
                edge.degree as usize + 1
            };
            edge_nodes.push(nodes);
            edge_offset.push(trace_len);
            trace_len += TRACE_VARS * nodes;
            if matches!(edge.kind, EdgeKind::Slave { .. }) {
                global_offset.push(None);
            } else {
                global_offset.push(Some(n_global));
                n_global += TRACE_VARS * nodes;
            }
        }
        let mut slave_weights = vec![None; n];
        for (eid, edge) in mesh.edges.iter().enumerate() {
            if let EdgeKind::Slave { master } = edge.kind {
                let m = &mesh.edges[master];
                let deg = m.degree as usize;
                let mnodes = lobatto_points(deg);
                let snodes = lobatto_points(deg);
                let mut w = vec![vec![0.0; deg + 1]; deg + 1];
                for (si, &sref) in snodes.iter().enumerate() {
                    // Slave node position mapped into master reference coords.
                    let t = edge.span[0] + 0.5 * (sref + 1.0) * (edge.span[1] - edge.span[0]);
                    let tref = 2.0 * (t - m.span[0]) / (m.span[1] - m.span[0]) - 1.0;
                    for mi in 0..=deg {
                        w[si][mi] = lagrange_value(&mnodes, mi, tref);
                    }
                }
                slave_weights[eid] = Some((master, w));
            }
        }
        Self {
            edge_nodes,
            edge_offset,
            trace_len,
            global_offset,
            n_global,
            slave_weights,
        }
    }

    /// Full-vector index of (edge, var, node).
    pub fn trace_index(&self, edge: EdgeId, var: usize, node: usize) -> usize {
        self.edge_offset[edge] + var * self.edge_nodes[edge] + node
    }

    /// Resolves a trace DoF to global solve DoFs with weights.
    pub fn resolve(&self, edge: EdgeId, var: usize, node: usize) -> Vec<(usize, f64)> {
        match &self.slave_weights[edge] {
            None => {
                let g = self.global_offset[edge].expect("free edge has global offset");
                vec![(g + var * self.edge_nodes[edge] + node, 1.0)]
            }
            Some((master, w)) => {
                let g = self.global_offset[*master].expect("master edge has global offset");
                let mnodes = self.edge_nodes[*master];
                w[node]
                    .iter()
                    .enumerate()
                    .filter(|(_, wk)| wk.abs() > 0.0)
                    .map(|(k, wk)| (g + var * mnodes + k, *wk))
                    .collect()
            }
        }
    }

    /// Expands a global solve vector into the full per-edge trace vector,
    /// filling slave DoFs from their constraints exactly.
    pub fn expand(&self, global: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.trace_len];
        for edge in 0..self.edge_nodes.len() {
            for var in 0..TRACE_VARS {
                for node in 0..self.edge_nodes[edge] {
                    let mut v = 0.0;
                    for (g, w) in self.resolve(edge, var, node) {
                        v += w * global[g];
                    }
                    full[self.trace_index(edge, var, node)] = v;
                }
            }
        }
        full
    }

    /// Re-imposes slave constraints on a full trace vector in place.
    pub fn refresh_slaves(&self, full: &mut [f64]) {
        for edge in 0..self.edge_nodes.len() {
            if let Some((master, w)) = &self.slave_weights[edge] {
                for var in 0..TRACE_VARS {
                    for node in 0..self.edge_nodes[edge] {
                        let mut v = 0.0;
                        for (k, wk) in w[node].iter().enumerate() {
                            v += wk * full[self.trace_index(*master, var, k)];
                        }
                        full[self.trace_index(edge, var, node)] = v;
                    }
                }
            }
        }
    }

    /// Maximum violation of the slave constraints over a full trace vector.
    pub fn constraint_violation(&self, full: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for edge in 0..self.edge_nodes.len() {
            if let Some((master, w)) = &self.slave_weights[edge] {
                for var in 0..TRACE_VARS {
                    for node in 0..self.edge_nodes[edge] {
                        let mut v = 0.0;
                        for (k, wk) in w[node].iter().enumerate() {
                            v += wk * full[self.trace_index(*master, var, k)];
                        }
                        worst = worst.max((v - full[self.trace_index(edge, var, node)]).abs());
                    }
                }
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{BoundarySegment, ContactSpec};

    fn contacts_1d(lo: f64, hi: f64) -> Vec<ContactSpec> {
        vec![
            ContactSpec {
                id: 0,
                name: "left".into(),
                segments: vec![BoundarySegment { normal_axis: 0, at_um: lo, from_um: lo, to_um: lo }],
            },
            ContactSpec {
                id: 1,
                name: "right".into(),
                segments: vec![BoundarySegment { normal_axis: 0, at_um: hi, from_um: hi, to_um: hi }],
            },
        ]
    }

    #[test]
    fn uniform_1d_counts() {
        let mesh = Mesh::uniform_1d(0.0, 20.0, 100, &contacts_1d(0.0, 20.0)).unwrap();
        assert_eq!(mesh.cells.len(), 100);
        assert_eq!(mesh.edges.len(), 101);
        for cell in &mesh.cells {
            assert!((cell.hi[0] - cell.lo[0] - 0.2).abs() < 1e-12);
        }
        assert_eq!(
            mesh.edges.iter().filter(|e| matches!(e.kind, EdgeKind::Dirichlet { .. })).count(),
            2
        );
        mesh.audit().unwrap();
    }

    #[test]
    fn uniform_2d_counts() {
        let mesh = Mesh::uniform_2d([0.0, 0.0], [4.0, 2.0], 4, 2, &[]).unwrap();
        assert_eq!(mesh.cells.len(), 8);
        assert_eq!(mesh.edges.len(), 22);
        mesh.audit().unwrap();

        let single = Mesh::uniform_2d([0.0, 0.0], [1.0, 1.0], 1, 1, &[]).unwrap();
        assert_eq!(single.cells.len(), 1);
        assert_eq!(single.edges.len(), 4);
        assert!(single.edges.iter().all(|e| e.is_boundary()));
    }

    #[test]
    fn refine_all_1d_stays_conforming() {
        let mesh = Mesh::uniform_1d(0.0, 1.0, 4, &contacts_1d(0.0, 1.0)).unwrap();
        let fine = mesh.refine(&(0..4).collect::<Vec<_>>()).unwrap();
        assert_eq!(fine.cells.len(), 8);
        assert_eq!(fine.edges.len(), 9);
        assert!(fine.edges.iter().all(|e| !matches!(e.kind, EdgeKind::Slave { .. })));
        fine.audit().unwrap();
    }

    #[test]
    fn hanging_midpoint_constraint() {
        let mesh = Mesh::uniform_2d([0.0, 0.0], [2.0, 1.0], 2, 1, &[]).unwrap();
        let refined = mesh.refine(&[1]).unwrap();
        assert_eq!(refined.cells.len(), 1 + 4);
        refined.audit().unwrap();
        let layout = SkeletonLayout::new(&refined);
        let slave_ids: Vec<usize> = refined
            .edges
            .iter()
            .enumerate()
            .filter(|(_, e)| matches!(e.kind, EdgeKind::Slave { .. }))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(slave_ids.len(), 2);
        // Degree-1 half edge: one node at a master endpoint, the other at the
        // master midpoint with the (1/2, 1/2) average rule.
        let (_, w) = layout.slave_weights[slave_ids[0]].as_ref().unwrap();
        let mut seen_avg = false;
        for row in w {
            if row.iter().all(|v| (v - 0.5).abs() < 1e-13) {
                seen_avg = true;
            }
        }
        assert!(seen_avg, "midpoint averaging row missing: {w:?}");
    }

    #[test]
    fn closure_keeps_one_irregularity() {
        let mesh = Mesh::uniform_2d([0.0, 0.0], [4.0, 4.0], 2, 2, &[]).unwrap();
        let r1 = mesh.refine(&[0]).unwrap();
        r1.audit().unwrap();
        // Refine the corner child twice more; closure must fan out.
        let corner = r1
            .cells
            .iter()
            .position(|c| c.lo == [0.0, 0.0] && c.level == 1)
            .unwrap();
        let r2 = r1.refine(&[corner]).unwrap();
        r2.audit().unwrap();
        let corner2 = r2
            .cells
            .iter()
            .position(|c| c.lo == [0.0, 0.0] && c.level == 2)
            .unwrap();
        let r3 = r2.refine(&[corner2]).unwrap();
        r3.audit().unwrap();
        for (a, b) in r3.adjacent_pairs() {
            assert!(r3.cells[a].level.abs_diff(r3.cells[b].level) <= 1);
        }
    }

    #[test]
    fn mixed_degree_edge_takes_max() {
        let mut mesh = Mesh::uniform_2d([0.0, 0.0], [2.0, 1.0], 2, 1, &[]).unwrap();
        mesh.assign_schemes(&[SchemeTag::Ha, SchemeTag::Conventional(2)]).unwrap();
        let shared = mesh
            .edges
            .iter()
            .find(|e| e.kind == EdgeKind::Interior)
            .unwrap();
        assert_eq!(shared.degree, 2);
        mesh.audit().unwrap();
        let layout = SkeletonLayout::new(&mesh);
        assert_eq!(layout.edge_nodes[mesh.cells[0].edges[1]], 3);
    }

    #[test]
    fn all_ha_means_all_degree_one() {
        let mut mesh = Mesh::uniform_2d([0.0, 0.0], [2.0, 2.0], 2, 2, &[]).unwrap();
        mesh.assign_schemes(&[SchemeTag::Ha; 4]).unwrap();
        assert!(mesh.edges.iter().all(|e| e.degree == 1));
    }

    #[test]
    fn expand_satisfies_constraints() {
        let mesh = Mesh::uniform_2d([0.0, 0.0], [2.0, 2.0], 2, 2, &[]).unwrap();
        let refined = mesh.refine(&[3]).unwrap();
        let layout = SkeletonLayout::new(&refined);
        let global: Vec<f64> = (0..layout.n_global).map(|i| (i as f64 * 0.37).sin()).collect();
        let full = layout.expand(&global);
        assert!(layout.constraint_violation(&full) <= 1e-13);
    }
}
