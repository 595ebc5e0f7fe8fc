use thiserror::Error;

/// Errors raised while building devices, meshes or run configurations.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{quantity} must be positive, got {value}")]
    NonPositive { quantity: &'static str, value: f64 },
    #[error("unknown device preset '{0}'")]
    UnknownPreset(String),
    #[error("degenerate domain: {0}")]
    DegenerateDomain(String),
    #[error("harmonic-averaging cells are degree 1; requested degree {0}")]
    HaDegree(u8),
    #[error("unknown contact id {0}")]
    UnknownContact(usize),
    #[error("invalid configuration at `{path}`: {message}")]
    Invalid { path: String, message: String },
}

/// Errors raised by the nonlinear and linear solve machinery.
///
/// Newton non-convergence is *not* an error: it is reported as data in
/// [`crate::report::SolverReport`] so that sweep drivers can react to it.
#[derive(Debug, Error)]
pub enum SolveError {
    #[error("singular local matrix on cell {cell}")]
    SingularLocal { cell: usize },
    #[error("skeleton system factorization failed: {0}")]
    SkeletonFactorization(String),
    #[error("dangling constraint: slave edge {slave} references edge {master}")]
    DanglingConstraint { slave: usize, master: usize },
    #[error("non-finite value produced during {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Config(#[from] ConfigError),
}
