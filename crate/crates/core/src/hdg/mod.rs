//! Hybridizable discontinuous Galerkin local assembly: conventional cells,
//! harmonic-averaging cells, numerical fluxes, transmission and Dirichlet
//! trace rows, with analytic linearization.

mod assembly;
mod geom;
mod system;

pub use assembly::{
    assemble_cell, compute_tau, stabilization_taus, CellAssembly, CellJacobian, TauTable, TAU_PSI,
};
pub use geom::{build_cell_geom, CellGeom, FaceGeom, FaceKind};
pub use system::{CarrierExtrema, DiscreteState, FieldSample, GradField, HdgSystem};
