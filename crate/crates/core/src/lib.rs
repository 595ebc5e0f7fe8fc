//! Steady-state semiconductor device simulation on the coupled
//! Poisson/drift-diffusion (PNP) system.
//!
//! The crate provides interchangeable discretizations behind a single
//! Newton + voltage-continuation driver:
//!
//! - a 1D finite-volume Scharfetter-Gummel backend ([`fvsg`]),
//! - conventional hybridizable discontinuous Galerkin of degree 1..3 ([`hdg`]),
//! - HDG with harmonic-averaging carrier equations on degree-1 cells,
//! - mixed meshes where per-cell scheme tags switch between the two.
//!
//! All numerics run in the nondimensional units of [`physics::ScaledProblem`];
//! device descriptions ([`device::DeviceSpec`]) carry physical units (um,
//! cm^-3, V) and are scaled on entry.

pub mod adapt;
pub mod basis;
pub mod bernoulli;
pub mod device;
pub mod doping;
pub mod error;
pub mod fvsg;
pub mod hdg;
pub mod mesh;
pub mod physics;
pub mod post;
pub mod report;
pub mod solver;

pub use error::{ConfigError, SolveError};
pub use physics::{MaterialParams, ScaledProblem, ScalingBases};

/// Maps an indexed range through `f`, in parallel when the `parallel`
/// feature is enabled. Results come back in index order either way.
pub fn par_map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
