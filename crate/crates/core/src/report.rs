//! Solver outcome records: Newton histories, sweep records and I-V tables.
//!
//! Non-convergence is data here, not an error; stability classification and
//! sweep drivers consume these records.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergedBy {
    /// Maximum equation residual below eps_tol.
    Residual,
    /// Maximum relative Newton step below eps_rel.
    StepSize,
}

#[derive(Debug, Clone, Serialize)]
pub struct NewtonReport {
    pub converged: bool,
    pub criterion: Option<ConvergedBy>,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub step_history: Vec<f64>,
    pub backtrack_total: usize,
    pub factorizations: usize,
    /// Recombination denominator clamps seen while assembling (unphysical
    /// iterate diagnostics).
    pub clamped_recombination: usize,
    pub failure: Option<String>,
    /// Wall time is excluded from serialized reports so identical runs
    /// produce byte-identical files.
    #[serde(skip)]
    pub wall: std::time::Duration,
}

impl NewtonReport {
    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::NAN)
    }
}

/// One converged (or failed) continuation point.
#[derive(Debug, Clone, Serialize)]
pub struct BiasPointRecord {
    pub bias_v: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    pub step_v: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub completed: bool,
    pub points: Vec<BiasPointRecord>,
    /// Bias at which the step fell below the minimum, when the sweep failed.
    pub failed_at_v: Option<Vec<f64>>,
    pub newton_iterations_total: usize,
    pub factorizations_total: usize,
    #[serde(skip)]
    pub wall: std::time::Duration,
}

/// One I-V table row; currents are reported per contact.
#[derive(Debug, Clone, Serialize)]
pub struct IvRow {
    pub bias_v: Vec<f64>,
    pub current_acm2: Vec<f64>,
    pub current_a: Vec<f64>,
    pub newton_iterations: usize,
    pub outcome: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct IvTable {
    pub contact_names: Vec<String>,
    pub rows: Vec<IvRow>,
    pub completed: bool,
}

impl IvTable {
    /// Biases move monotonically toward the targets along the sweep.
    pub fn is_monotone(&self) -> bool {
        for c in 0..self.contact_names.len() {
            let vals: Vec<f64> = self.rows.iter().map(|r| r.bias_v[c]).collect();
            let increasing = vals.windows(2).all(|w| w[1] >= w[0] - 1e-15);
            let decreasing = vals.windows(2).all(|w| w[1] <= w[0] + 1e-15);
            if !increasing && !decreasing {
                return false;
            }
        }
        true
    }
}

/// Stability classification of a sweep outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stability {
    /// Converged to the target bias with no oscillation flags.
    S,
    /// Converged but the oscillation metric fired.
    O,
    /// Failed to reach the target bias.
    F,
}

impl std::fmt::Display for Stability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stability::S => write!(f, "S"),
            Stability::O => write!(f, "O"),
            Stability::F => write!(f, "F"),
        }
    }
}
