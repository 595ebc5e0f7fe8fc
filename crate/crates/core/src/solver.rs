//! Newton iteration with residual backtracking, voltage continuation, static
//! condensation and the sparse skeleton solve.

use crate::error::SolveError;
use crate::report::{BiasPointRecord, ConvergedBy, IvRow, IvTable, NewtonReport, SweepReport};
use nalgebra::{DMatrix, DVector};
use std::time::Instant;

/// Newton convergence and globalization controls.
#[derive(Debug, Clone)]
pub struct NewtonOptions {
    /// Residual infinity-norm tolerance (scaled equations).
    pub eps_tol: f64,
    /// Relative step tolerance over the scalar variables.
    pub eps_rel: f64,
    /// Absolute floor in the relative-step denominator for potentials.
    pub eps_abs_psi: f64,
    pub max_iterations: usize,
    /// Step-halving factor for residual backtracking.
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// Clamp carrier unknowns at zero after each accepted step.
    pub positivity_cutoff: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            eps_tol: 1e-8,
            eps_rel: 1e-6,
            eps_abs_psi: 1.0,
            max_iterations: 50,
            backtrack_factor: 0.5,
            max_backtracks: 10,
            positivity_cutoff: false,
        }
    }
}

/// Voltage continuation controls (physical volts).
#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub initial_step_v: f64,
    pub min_step_v: f64,
    /// Target applied voltage per contact id.
    pub targets_v: Vec<f64>,
}

impl SweepOptions {
    pub fn new(targets_v: Vec<f64>) -> Self {
        Self {
            initial_step_v: 0.05,
            min_step_v: 1e-6,
            targets_v,
        }
    }
}

/// A backend the Newton/continuation driver can operate.
///
/// Implementations assemble residuals and Newton directions for a coupled
/// Poisson/drift-diffusion system at a given set of scaled contact biases.
pub trait Discretization: Sync {
    type State: Clone + Send;

    /// Infinity norm of the full residual at `state`.
    fn residual_norm(&self, state: &Self::State, bias: &[f64]) -> Result<f64, SolveError>;

    /// Assembles the Jacobian, solves for the Newton direction and returns
    /// it together with the residual norm at `state`.
    fn newton_step(&self, state: &Self::State, bias: &[f64])
        -> Result<(f64, Self::State), SolveError>;

    /// `state += alpha * delta`.
    fn apply_step(&self, state: &mut Self::State, delta: &Self::State, alpha: f64);

    /// max |alpha delta_u| / (|u| + eps_abs) over the scalar variables
    /// (psi, n, p and their traces), with eps_abs = eps_abs_psi for
    /// potential-like and the intrinsic concentration for carrier-like ones.
    fn max_rel_step(
        &self,
        state: &Self::State,
        delta: &Self::State,
        alpha: f64,
        eps_abs_psi: f64,
    ) -> f64;

    /// Clamps carrier unknowns at zero (positivity cutoff).
    fn clamp_carriers(&self, state: &mut Self::State);

    /// Scaled intrinsic concentration, the carrier eps_abs.
    fn carrier_abs_floor(&self) -> f64;

    /// Scaled flux integral sum_contact (J_n-hat + J_p-hat) . n ds per
    /// contact id, positive outward.
    fn contact_flux_integrals(&self, state: &Self::State) -> Vec<f64>;
}

/// Full Newton with residual-norm backtracking and the two convergence
/// criteria (residual norm or maximum relative step).
pub fn newton_solve<D: Discretization>(
    disc: &D,
    state: &mut D::State,
    bias: &[f64],
    opts: &NewtonOptions,
) -> Result<NewtonReport, SolveError> {
    let start = Instant::now();
    let mut report = NewtonReport {
        converged: false,
        criterion: None,
        iterations: 0,
        residual_history: Vec::new(),
        step_history: Vec::new(),
        backtrack_total: 0,
        factorizations: 0,
        clamped_recombination: 0,
        failure: None,
        wall: std::time::Duration::ZERO,
    };

    let step = match disc.newton_step(state, bias) {
        Ok(s) => s,
        Err(e) => return Ok(fail(report, e, start)),
    };
    report.factorizations += 1;
    let (mut res, mut delta) = step;
    report.residual_history.push(res);
    if !res.is_finite() {
        return Ok(fail(report, SolveError::NonFinite("initial residual"), start));
    }
    if res <= opts.eps_tol {
        report.converged = true;
        report.criterion = Some(ConvergedBy::Residual);
        report.wall = start.elapsed();
        return Ok(report);
    }

    for iter in 1..=opts.max_iterations {
        report.iterations = iter;
        // Backtracking on the residual infinity norm.
        let mut alpha = 1.0;
        let mut accepted = None;
        for bt in 0..=opts.max_backtracks {
            let mut trial = state.clone();
            disc.apply_step(&mut trial, &delta, alpha);
            if opts.positivity_cutoff {
                disc.clamp_carriers(&mut trial);
            }
            let trial_res = disc.residual_norm(&trial, bias)?;
            if trial_res.is_finite() && (trial_res < res || trial_res <= opts.eps_tol) {
                accepted = Some((trial, trial_res, alpha));
                break;
            }
            report.backtrack_total += 1;
            if bt == opts.max_backtracks {
                break;
            }
            alpha *= opts.backtrack_factor;
        }
        let Some((trial, trial_res, used_alpha)) = accepted else {
            report.failure = Some(format!(
                "line search stalled at residual {res:.3e} after {} halvings",
                opts.max_backtracks
            ));
            report.wall = start.elapsed();
            return Ok(report);
        };
        let rel_step = disc.max_rel_step(state, &delta, used_alpha, opts.eps_abs_psi);
        *state = trial;
        res = trial_res;
        report.residual_history.push(res);
        report.step_history.push(rel_step);

        if res <= opts.eps_tol {
            report.converged = true;
            report.criterion = Some(ConvergedBy::Residual);
            break;
        }
        if rel_step <= opts.eps_rel {
            report.converged = true;
            report.criterion = Some(ConvergedBy::StepSize);
            break;
        }
        if iter == opts.max_iterations {
            report.failure = Some(format!(
                "no convergence in {} iterations, residual {res:.3e}",
                opts.max_iterations
            ));
            break;
        }
        match disc.newton_step(state, bias) {
            Ok((_, d)) => {
                report.factorizations += 1;
                delta = d;
            }
            Err(e) => return Ok(fail(report, e, start)),
        }
    }
    report.wall = start.elapsed();
    Ok(report)
}

fn fail(mut report: NewtonReport, e: SolveError, start: Instant) -> NewtonReport {
    report.failure = Some(e.to_string());
    report.wall = start.elapsed();
    report
}

/// Contact geometry needed to turn scaled flux integrals into currents.
#[derive(Debug, Clone)]
pub struct ContactSet {
    pub names: Vec<String>,
    /// Scaled boundary length per contact (1 for 1D point contacts).
    pub length_scaled: Vec<f64>,
    /// Physical electrode area per contact (cm^2).
    pub area_cm2: Vec<f64>,
    pub j_star: f64,
    pub v_star: f64,
}

impl ContactSet {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn density_acm2(&self, contact: usize, flux_integral: f64) -> f64 {
        flux_integral / self.length_scaled[contact] * self.j_star
    }

    pub fn total_a(&self, contact: usize, flux_integral: f64) -> f64 {
        self.density_acm2(contact, flux_integral) * self.area_cm2[contact]
    }
}

/// Ramps contact voltages from the current (converged) bias toward the
/// targets. The step halves after a Newton failure and doubles back after
/// two consecutive successes, capped at the initial step; the sweep fails
/// only when the step would drop below `min_step_v`.
pub fn voltage_sweep<D: Discretization>(
    disc: &D,
    state: &mut D::State,
    start_bias_v: &[f64],
    sweep: &SweepOptions,
    newton: &NewtonOptions,
    contacts: &ContactSet,
) -> Result<(IvTable, SweepReport), SolveError> {
    let t0 = Instant::now();
    let n_contacts = sweep.targets_v.len();
    let mut bias_v = start_bias_v.to_vec();
    let mut table = IvTable {
        contact_names: contacts.names.clone(),
        rows: Vec::new(),
        completed: false,
    };
    let mut rep = SweepReport {
        completed: false,
        points: Vec::new(),
        failed_at_v: None,
        newton_iterations_total: 0,
        factorizations_total: 0,
        wall: std::time::Duration::ZERO,
    };
    push_row(&mut table, disc, state, &bias_v, contacts, 0, "start");

    let mut step = sweep.initial_step_v;
    let mut streak = 0usize;
    loop {
        let remaining: f64 = (0..n_contacts)
            .map(|c| (sweep.targets_v[c] - bias_v[c]).abs())
            .fold(0.0, f64::max);
        if remaining <= 0.0 {
            table.completed = true;
            rep.completed = true;
            break;
        }
        let mut next_v = bias_v.clone();
        for c in 0..n_contacts {
            let d = sweep.targets_v[c] - bias_v[c];
            next_v[c] += d.signum() * d.abs().min(step);
        }
        let next_scaled: Vec<f64> = next_v.iter().map(|v| v / contacts.v_star).collect();
        let mut trial = state.clone();
        let nrep = newton_solve(disc, &mut trial, &next_scaled, newton)?;
        rep.newton_iterations_total += nrep.iterations;
        rep.factorizations_total += nrep.factorizations;
        if nrep.converged {
            *state = trial;
            bias_v = next_v;
            rep.points.push(BiasPointRecord {
                bias_v: bias_v.clone(),
                converged: true,
                iterations: nrep.iterations,
                final_residual: nrep.final_residual(),
                step_v: step,
            });
            push_row(&mut table, disc, state, &bias_v, contacts, nrep.iterations, "converged");
            streak += 1;
            if streak >= 2 {
                step = (step * 2.0).min(sweep.initial_step_v);
                streak = 0;
            }
        } else {
            rep.points.push(BiasPointRecord {
                bias_v: next_v.clone(),
                converged: false,
                iterations: nrep.iterations,
                final_residual: nrep.final_residual(),
                step_v: step,
            });
            streak = 0;
            step *= 0.5;
            if step < sweep.min_step_v {
                rep.failed_at_v = Some(next_v);
                break;
            }
        }
    }
    rep.wall = t0.elapsed();
    Ok((table, rep))
}

fn push_row<D: Discretization>(
    table: &mut IvTable,
    disc: &D,
    state: &D::State,
    bias_v: &[f64],
    contacts: &ContactSet,
    iterations: usize,
    outcome: &str,
) {
    let integrals = disc.contact_flux_integrals(state);
    let current_acm2: Vec<f64> = (0..contacts.len())
        .map(|c| contacts.density_acm2(c, integrals[c]))
        .collect();
    let current_a: Vec<f64> = (0..contacts.len())
        .map(|c| contacts.total_a(c, integrals[c]))
        .collect();
    table.rows.push(IvRow {
        bias_v: bias_v.to_vec(),
        current_acm2,
        current_a,
        newton_iterations: iterations,
        outcome: outcome.to_string(),
    });
}

/// Static condensation of one cell's blocks.
#[derive(Debug, Clone)]
pub struct CondensedCell {
    pub schur: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub ainv_b: DMatrix<f64>,
    pub ainv_f: DVector<f64>,
}

impl CondensedCell {
    /// Local reconstruction: delta_u = A^-1 (F - B delta_lambda).
    pub fn reconstruct(&self, delta_trace: &DVector<f64>) -> DVector<f64> {
        &self.ainv_f - &self.ainv_b * delta_trace
    }
}

/// Schur complement D - C A^-1 B and reduced right-hand side G - C A^-1 F,
/// via a factorization of A (no explicit inverse).
pub fn condense(
    cell: usize,
    a: DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    f: &DVector<f64>,
    g: &DVector<f64>,
) -> Result<CondensedCell, SolveError> {
    let lu = a.lu();
    let ainv_b = lu
        .solve(b)
        .ok_or(SolveError::SingularLocal { cell })?;
    let ainv_f = lu
        .solve(f)
        .ok_or(SolveError::SingularLocal { cell })?;
    let schur = d - c * &ainv_b;
    let rhs = g - c * &ainv_f;
    Ok(CondensedCell {
        schur,
        rhs,
        ainv_b,
        ainv_f,
    })
}

/// Direct sparse LU for the condensed skeleton system, with the symbolic
/// analysis cached across Newton iterations (the pattern is mesh-fixed).
#[derive(Debug, Default)]
pub struct SkeletonSolver {
    symbolic: Option<faer::sparse::linalg::solvers::SymbolicLu<usize>>,
}

impl SkeletonSolver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.symbolic = None;
    }

    pub fn solve(
        &mut self,
        n: usize,
        triplets: &[(usize, usize, f64)],
        rhs: &[f64],
    ) -> Result<Vec<f64>, SolveError> {
        use faer::linalg::solvers::Solve;
        use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
        use faer::sparse::{SparseColMat, Triplet};
        let entries: Vec<Triplet<usize, usize, f64>> = triplets
            .iter()
            .map(|&(r, c, v)| Triplet::new(r, c, v))
            .collect();
        let mat = SparseColMat::try_new_from_triplets(n, n, &entries)
            .map_err(|e| SolveError::SkeletonFactorization(format!("{e:?}")))?;
        if self.symbolic.is_none() {
            self.symbolic = Some(
                SymbolicLu::try_new(mat.symbolic())
                    .map_err(|e| SolveError::SkeletonFactorization(format!("{e:?}")))?,
            );
        }
        let lu = Lu::try_new_with_symbolic(self.symbolic.clone().unwrap(), mat.as_ref())
            .map_err(|e| SolveError::SkeletonFactorization(format!("{e:?}")))?;
        let rhs_mat = faer::Mat::<f64>::from_fn(n, 1, |i, _| rhs[i]);
        let sol: faer::Mat<f64> = lu.solve(rhs_mat.as_ref());
        Ok((0..n).map(|i| sol[(i, 0)]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn condense_scalar_example() {
        let a = DMatrix::from_element(1, 1, 2.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        let c = DMatrix::from_element(1, 1, 1.0);
        let d = DMatrix::from_element(1, 1, 3.0);
        let f = DVector::from_element(1, 4.0);
        let g = DVector::from_element(1, 5.0);
        let cc = condense(0, a, &b, &c, &d, &f, &g).unwrap();
        assert!((cc.schur[(0, 0)] - 2.5).abs() < 1e-15);
        assert!((cc.rhs[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn condense_decoupled() {
        let a = DMatrix::from_element(2, 2, 0.0) + DMatrix::identity(2, 2) * 3.0;
        let b = DMatrix::zeros(2, 3);
        let c = DMatrix::zeros(3, 2);
        let mut d = DMatrix::zeros(3, 3);
        d.fill_with_identity();
        let f = DVector::from_vec(vec![1.0, 2.0]);
        let g = DVector::from_vec(vec![3.0, 4.0, 5.0]);
        let cc = condense(0, a, &b, &c, &d, &f, &g).unwrap();
        assert_eq!(cc.schur, d);
        assert_eq!(cc.rhs, g);
        // B = 0: reconstruction ignores the trace update.
        let delta = DVector::from_vec(vec![9.0, -2.0, 4.0]);
        let du = cc.reconstruct(&delta);
        assert!((du[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn condense_singular_a_reports_cell() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(2, 1);
        let c = DMatrix::zeros(1, 2);
        let d = DMatrix::identity(1, 1);
        let f = DVector::zeros(2);
        let g = DVector::zeros(1);
        match condense(7, a, &b, &c, &d, &f, &g) {
            Err(SolveError::SingularLocal { cell }) => assert_eq!(cell, 7),
            other => panic!("expected singular local, got {other:?}"),
        }
    }

    #[test]
    fn skeleton_identity_solve() {
        let mut s = SkeletonSolver::new();
        let triplets: Vec<(usize, usize, f64)> = (0..5).map(|i| (i, i, 1.0)).collect();
        let rhs = vec![1.0, -2.0, 3.0, 0.5, 0.0];
        let x = s.solve(5, &triplets, &rhs).unwrap();
        for (a, b) in x.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn skeleton_laplace_linear_profile() {
        // 1D Laplacian with Dirichlet gap: interior solve gives the linear
        // interpolant (discrete maximum principle case).
        let n = 9;
        let mut triplets = Vec::new();
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            if i == 0 || i == n - 1 {
                triplets.push((i, i, 1.0));
                rhs[i] = if i == 0 { 0.0 } else { 1.0 };
            } else {
                triplets.push((i, i, 2.0));
                triplets.push((i, i - 1, -1.0));
                triplets.push((i, i + 1, -1.0));
            }
        }
        let mut s = SkeletonSolver::new();
        let x = s.solve(n, &triplets, &rhs).unwrap();
        for (i, v) in x.iter().enumerate() {
            let expect = i as f64 / (n - 1) as f64;
            assert!((v - expect).abs() < 1e-12, "{i}: {v}");
        }
    }

    #[test]
    fn skeleton_random_system_residual() {
        let n = 60;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        // SPD-perturbed band system with off-diagonal noise.
        let mut triplets = Vec::new();
        for i in 0..n {
            triplets.push((i, i, 4.0 + rng.gen_range(0.0..1.0)));
            if i + 1 < n {
                triplets.push((i, i + 1, rng.gen_range(-1.0..1.0)));
                triplets.push((i + 1, i, rng.gen_range(-1.0..1.0)));
            }
            if i + 7 < n {
                triplets.push((i, i + 7, rng.gen_range(-0.5..0.5)));
            }
        }
        let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut s = SkeletonSolver::new();
        let x = s.solve(n, &triplets, &rhs).unwrap();
        // Verify ||Mx - rhs|| / ||rhs|| <= 1e-10.
        let mut res = rhs.clone();
        for &(r, c, v) in &triplets {
            res[r] -= v * x[c];
        }
        let rn: f64 = res.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bn: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(rn / bn <= 1e-10);
        // Second solve reuses the cached symbolic analysis.
        let x2 = s.solve(n, &triplets, &rhs).unwrap();
        assert_eq!(x, x2);
    }
}
