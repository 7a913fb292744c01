//! Covariance-constrained entropic barycenter via Sinkhorn-Newton ascent.
//!
//! Problem, for arrays `j = 1..J` with real forward operators `A_j` and
//! lifted covariances `r_j`:
//!
//! ```text
//! min  sum_j  <C, M_j> + eps D(M_j) + gamma |Delta_j|^2
//! s.t. A_j (M_j 1) = r_j + Delta_j,   M_j^T 1 = phi
//! ```
//!
//! The dual is maximized block by block. For fixed `v_j` the `lambda_j` block
//! is the root of
//! `f(lambda) = A_j (u ⊙ K v_j) - r_j + lambda / (2 gamma)` with
//! `u = exp(A_j^T lambda / eps)`, found by damped Newton. For fixed `u_j` the
//! `mu` block is closed form: the barycenter is the geometric mean of the
//! `K^T u_j` and `v_j = y ./ (K^T u_j)`.
//!
//! Row sums of `M_j = diag(u_j) K diag(v_j)` are the per-array spectra
//! `phi_j = u_j ⊙ K v_j`; column sums are the barycenter.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::array::{lift_covariance, Covariance, ForwardOperator};
use crate::error::{Error, Result};
use crate::spatial::CostMatrix;
use crate::spectrum::Spectrum;
use crate::transport::{gibbs_kernel, GibbsKernel, TransportPlan};

const LINE_SEARCH_SHRINK: f64 = 0.5;
const SUFFICIENT_DECREASE: f64 = 1e-4;
const MIN_STEP: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct FusionProblem {
    operators: Vec<DMatrix<f64>>,
    observations: Vec<DVector<f64>>,
    bases: Vec<RowBasis>,
    cost: CostMatrix,
    kernel: GibbsKernel,
    epsilon: f64,
    gamma: f64,
}

impl FusionProblem {
    pub fn new(
        operators: Vec<DMatrix<f64>>,
        observations: Vec<DVector<f64>>,
        cost: CostMatrix,
        epsilon: f64,
        gamma: f64,
    ) -> Result<Self> {
        if operators.is_empty() {
            return Err(Error::InvalidParameter("fusion needs at least one array".into()));
        }
        if operators.len() != observations.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} operators but {} observations",
                operators.len(),
                observations.len()
            )));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
        }
        let n = cost.len();
        for (j, (a, r)) in operators.iter().zip(&observations).enumerate() {
            if a.ncols() != n {
                return Err(Error::DimensionMismatch(format!(
                    "operator {j} has {} columns, cost is {n}x{n}",
                    a.ncols()
                )));
            }
            if a.nrows() != r.len() {
                return Err(Error::DimensionMismatch(format!(
                    "operator {j} has {} rows, observation has length {}",
                    a.nrows(),
                    r.len()
                )));
            }
            if a.iter().chain(r.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("array {j} has non-finite data")));
            }
        }
        if observations.iter().all(|r| r.iter().all(|&x| x == 0.0)) {
            return Err(Error::InvalidParameter(
                "all observations are zero; the barycenter is undetermined".into(),
            ));
        }
        let kernel = gibbs_kernel(&cost, epsilon)?;
        let bases = operators.iter().map(RowBasis::new).collect();
        Ok(Self {
            bases,
            operators,
            observations,
            cost,
            kernel,
            epsilon,
            gamma,
        })
    }

    /// Assemble from per-array forward operators and (unlifted) covariances.
    pub fn from_covariances(
        operators: &[ForwardOperator],
        covariances: &[Covariance],
        cost: CostMatrix,
        epsilon: f64,
        gamma: f64,
    ) -> Result<Self> {
        if operators.len() != covariances.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} operators but {} covariances",
                operators.len(),
                covariances.len()
            )));
        }
        let mut obs = Vec::with_capacity(covariances.len());
        for (op, cov) in operators.iter().zip(covariances) {
            if op.sensors() != cov.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "array '{}' has {} sensors but covariance is {}x{}",
                    op.label(),
                    op.sensors(),
                    cov.dim(),
                    cov.dim()
                )));
            }
            obs.push(lift_covariance(cov.matrix())?);
        }
        Self::new(
            operators.iter().map(|o| o.matrix().clone()).collect(),
            obs,
            cost,
            epsilon,
            gamma,
        )
    }

    pub fn arrays(&self) -> usize {
        self.operators.len()
    }

    pub fn grid_len(&self) -> usize {
        self.cost.len()
    }

    pub fn operator(&self, j: usize) -> &DMatrix<f64> {
        &self.operators[j]
    }

    pub fn observation(&self, j: usize) -> &DVector<f64> {
        &self.observations[j]
    }

    pub fn cost(&self) -> &CostMatrix {
        &self.cost
    }

    pub fn kernel(&self) -> &GibbsKernel {
        &self.kernel
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FusionOptions {
    pub outer_tol: f64,
    pub max_outer: usize,
    pub newton_tol: f64,
    pub max_newton: usize,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self {
            outer_tol: 1e-7,
            max_outer: 5000,
            newton_tol: 1e-9,
            max_newton: 50,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub outer_iterations: usize,
    /// Total Newton iterations per array.
    pub newton_iterations: Vec<usize>,
    /// Last Newton residual (inf-norm) per array.
    pub newton_residuals: Vec<f64>,
    /// Dual objective at initialization and after every outer sweep.
    pub dual_history: Vec<f64>,
    /// Relative l1 change of the barycenter per outer sweep.
    pub change_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SolverState {
    pub lambda: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub barycenter: DVector<f64>,
    pub diagnostics: Diagnostics,
}

impl SolverState {
    /// `lambda_j = 0`, `u_j = 1`, `v_j = 1`; the barycenter starts as the
    /// geometric mean of `K^T 1`.
    pub fn initial(problem: &FusionProblem) -> Result<Self> {
        let n = problem.grid_len();
        let jn = problem.arrays();
        let u: Vec<DVector<f64>> = vec![DVector::from_element(n, 1.0); jn];
        let barycenter = update_barycenter(&u, problem.kernel())?;
        Ok(Self {
            lambda: (0..jn).map(|j| DVector::zeros(problem.operator(j).nrows())).collect(),
            u,
            v: vec![DVector::from_element(n, 1.0); jn],
            barycenter,
            diagnostics: Diagnostics {
                newton_iterations: vec![0; jn],
                newton_residuals: vec![f64::NAN; jn],
                ..Diagnostics::default()
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct NewtonSolution {
    pub lambda: DVector<f64>,
    pub u: DVector<f64>,
    pub iterations: usize,
    /// Inf-norm of the block residual at `lambda`.
    pub residual: f64,
}

struct BlockEval {
    u: DVector<f64>,
    weights: DVector<f64>,
    f: DVector<f64>,
    /// Block objective `eps 1^T (u ⊙ K v) - lambda^T r + |lambda|^2 / (4 gamma)`,
    /// whose gradient is `f`.
    psi: f64,
}

fn eval_block(
    a: &DMatrix<f64>,
    r: &DVector<f64>,
    kv: &DVector<f64>,
    epsilon: f64,
    gamma: f64,
    lambda: &DVector<f64>,
) -> BlockEval {
    let u = (a.tr_mul(lambda) / epsilon).map(f64::exp);
    let weights = u.component_mul(kv);
    let f = a * &weights - r + lambda / (2.0 * gamma);
    let psi = epsilon * weights.sum() - lambda.dot(r) + lambda.norm_squared() / (4.0 * gamma);
    BlockEval { u, weights, f, psi }
}

/// Distinct rows of an operator up to sign.
///
/// Lifted Hermitian data repeat themselves: the real parts of entries (i, k)
/// and (k, i) coincide, the imaginary parts are negatives and the diagonal
/// imaginary parts vanish. Rows are matched bitwise, so this is exact.
#[derive(Debug, Clone)]
struct RowBasis {
    basis: DMatrix<f64>,
    map: Vec<Option<(usize, f64)>>,
}

impl RowBasis {
    fn new(a: &DMatrix<f64>) -> Self {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut rows: Vec<usize> = Vec::new();
        let mut map = Vec::with_capacity(a.nrows());
        for i in 0..a.nrows() {
            let row = a.row(i);
            let Some(lead) = row.iter().copied().find(|&x| x != 0.0) else {
                map.push(None);
                continue;
            };
            let sign = if lead > 0.0 { 1.0 } else { -1.0 };
            // adding 0.0 folds -0.0 into 0.0
            let key: Vec<u64> = row.iter().map(|&x| (sign * x + 0.0).to_bits()).collect();
            let next = rows.len();
            let slot = *index.entry(key).or_insert(next);
            if slot == next {
                rows.push(i);
            }
            map.push(Some((slot, sign)));
        }
        let basis = DMatrix::from_fn(rows.len(), a.ncols(), |r, c| {
            let (slot, sign) = map[rows[r]].unwrap();
            debug_assert_eq!(slot, r);
            sign * a[(rows[r], c)]
        });
        Self { basis, map }
    }

    fn jacobian(&self, weights: &DVector<f64>, epsilon: f64, gamma: f64) -> DMatrix<f64> {
        let reduced = block_jacobian_dense(&self.basis, weights, epsilon);
        let m = self.map.len();
        let mut jac = DMatrix::from_fn(m, m, |i, l| match (self.map[i], self.map[l]) {
            (Some((ri, si)), Some((rl, sl))) => si * sl * reduced[(ri, rl)],
            _ => 0.0,
        });
        for i in 0..m {
            jac[(i, i)] += 1.0 / (2.0 * gamma);
        }
        jac
    }
}

fn block_jacobian_dense(a: &DMatrix<f64>, weights: &DVector<f64>, epsilon: f64) -> DMatrix<f64> {
    let mut scaled = a.clone();
    for (mut col, w) in scaled.column_iter_mut().zip(weights.iter()) {
        col *= (w / epsilon).sqrt();
    }
    &scaled * scaled.transpose()
}

/// `(1/eps) A diag(w) A^T + (1/(2 gamma)) I`
pub fn block_jacobian(a: &DMatrix<f64>, weights: &DVector<f64>, epsilon: f64, gamma: f64) -> DMatrix<f64> {
    let mut jac = block_jacobian_dense(a, weights, epsilon);
    for i in 0..jac.nrows() {
        jac[(i, i)] += 1.0 / (2.0 * gamma);
    }
    jac
}

/// Solve `A (exp(A^T lambda / eps) ⊙ kv) - r + lambda / (2 gamma) = 0`.
///
/// Damped Newton with backtracking.
#[allow(clippy::too_many_arguments)]
pub fn newton_solve_lambda(
    a: &DMatrix<f64>,
    r: &DVector<f64>,
    kv: &DVector<f64>,
    epsilon: f64,
    gamma: f64,
    lambda_init: &DVector<f64>,
    newton_tol: f64,
    max_newton: usize,
) -> Result<NewtonSolution> {
    newton_with_basis(a, &RowBasis::new(a), r, kv, epsilon, gamma, lambda_init, newton_tol, max_newton)
}

#[allow(clippy::too_many_arguments)]
fn newton_with_basis(
    a: &DMatrix<f64>,
    basis: &RowBasis,
    r: &DVector<f64>,
    kv: &DVector<f64>,
    epsilon: f64,
    gamma: f64,
    lambda_init: &DVector<f64>,
    newton_tol: f64,
    max_newton: usize,
) -> Result<NewtonSolution> {
    if kv.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::InvalidParameter("K v must be strictly positive".into()));
    }
    if !(epsilon > 0.0 && gamma > 0.0) {
        return Err(Error::InvalidParameter("epsilon and gamma must be positive".into()));
    }
    if lambda_init.len() != a.nrows() || r.len() != a.nrows() || kv.len() != a.ncols() {
        return Err(Error::DimensionMismatch("Newton block dimensions disagree".into()));
    }

    let mut lambda = lambda_init.clone();
    let mut cur = eval_block(a, r, kv, epsilon, gamma, &lambda);
    if !cur.f.iter().all(|x| x.is_finite()) {
        // the warm start overflowed; restart from zero
        lambda.fill(0.0);
        cur = eval_block(a, r, kv, epsilon, gamma, &lambda);
    }
    let mut iterations = 0;
    loop {
        let res_inf = cur.f.amax();
        if res_inf <= newton_tol {
            return Ok(NewtonSolution {
                lambda,
                u: cur.u,
                iterations,
                residual: res_inf,
            });
        }
        if iterations >= max_newton {
            return Err(Error::NewtonNotConverged {
                iterations,
                residual: res_inf,
            });
        }
        iterations += 1;

        let jac = basis.jacobian(&cur.weights, epsilon, gamma);
        let chol = jac.cholesky().ok_or(Error::JacobianNotPositiveDefinite)?;
        let step = -chol.solve(&cur.f);

        // Armijo on the convex block objective; near the root its decrease
        // drowns in round-off, so a sufficient drop of |f| also qualifies
        let norm0 = cur.f.norm();
        let slope = cur.f.dot(&step);
        let mut sigma = 1.0;
        loop {
            let trial_lambda = &lambda + &step * sigma;
            let trial = eval_block(a, r, kv, epsilon, gamma, &trial_lambda);
            let norm = trial.f.norm();
            let armijo = trial.psi <= cur.psi + SUFFICIENT_DECREASE * sigma * slope;
            let residual_drop = norm <= (1.0 - SUFFICIENT_DECREASE * sigma) * norm0;
            if norm.is_finite() && trial.psi.is_finite() && (armijo || residual_drop) {
                lambda = trial_lambda;
                cur = trial;
                break;
            }
            sigma *= LINE_SEARCH_SHRINK;
            if sigma < MIN_STEP {
                return Err(Error::LineSearchFailed {
                    iteration: iterations,
                    residual: res_inf,
                });
            }
        }
    }
}

fn geometric_mean(ktu: &[DVector<f64>]) -> Result<DVector<f64>> {
    let n = ktu[0].len();
    let jn = ktu.len() as f64;
    let mut log_sum = DVector::<f64>::zeros(n);
    for (j, k) in ktu.iter().enumerate() {
        for (i, &x) in k.iter().enumerate() {
            if !(x > 0.0) || !x.is_finite() {
                return Err(Error::Numerical(format!(
                    "K^T u_{j} has non-positive entry {x} at cell {i}"
                )));
            }
            log_sum[i] += x.ln();
        }
    }
    Ok(log_sum.map(|s| (s / jn).exp()))
}

/// Barycenter step: elementwise geometric mean of `K^T u_j`.
pub fn update_barycenter(u: &[DVector<f64>], kernel: &GibbsKernel) -> Result<DVector<f64>> {
    if u.is_empty() {
        return Err(Error::InvalidParameter("no scaling vectors".into()));
    }
    let ktu: Vec<DVector<f64>> = u.iter().map(|uj| kernel.apply_transpose(uj)).collect();
    geometric_mean(&ktu)
}

fn divide_positive(y: &DVector<f64>, ktu: &DVector<f64>) -> Result<DVector<f64>> {
    let mut v = DVector::zeros(y.len());
    for i in 0..y.len() {
        if !(ktu[i] > 0.0) {
            return Err(Error::Numerical(format!("division by zero at cell {i}")));
        }
        v[i] = y[i] / ktu[i];
    }
    Ok(v)
}

/// `v_j = y ./ (K^T u_j)`
pub fn update_v(y: &DVector<f64>, u_j: &DVector<f64>, kernel: &GibbsKernel) -> Result<DVector<f64>> {
    divide_positive(y, &kernel.apply_transpose(u_j))
}

fn dual_term(
    problem: &FusionProblem,
    j: usize,
    lambda: &DVector<f64>,
    u: &DVector<f64>,
    kv: &DVector<f64>,
) -> f64 {
    let eps = problem.epsilon;
    let n = problem.grid_len() as f64;
    lambda.dot(problem.observation(j)) - eps * u.dot(kv) - lambda.norm_squared() / (4.0 * problem.gamma)
        + eps * n * n
}

/// `sum_j lambda_j^T r_j - eps u_j^T K v_j - |lambda_j|^2 / (4 gamma) + eps n^2`
pub fn dual_objective(state: &SolverState, problem: &FusionProblem) -> f64 {
    (0..problem.arrays())
        .map(|j| {
            let kv = problem.kernel.apply(&state.v[j]);
            dual_term(problem, j, &state.lambda[j], &state.u[j], &kv)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayResidual {
    /// `|A_j (u_j ⊙ K v_j) - r_j + lambda_j / (2 gamma)|_inf`
    pub newton: f64,
    /// `|v_j ⊙ (K^T u_j) - y|_inf`
    pub agreement: f64,
}

pub fn residuals(state: &SolverState, problem: &FusionProblem) -> Vec<ArrayResidual> {
    (0..problem.arrays())
        .map(|j| {
            let a = problem.operator(j);
            let kv = problem.kernel.apply(&state.v[j]);
            let f = a * state.u[j].component_mul(&kv) - problem.observation(j)
                + &state.lambda[j] / (2.0 * problem.gamma);
            let ktu = problem.kernel.apply_transpose(&state.u[j]);
            let agreement = (state.v[j].component_mul(&ktu) - &state.barycenter).amax();
            ArrayResidual {
                newton: f.amax(),
                agreement,
            }
        })
        .collect()
}

/// Outcome of a single outer sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOutcome {
    pub change: f64,
    pub converged: bool,
}

/// Stateful driver for the outer block-ascent loop.
pub struct FusionSolver<'p> {
    problem: &'p FusionProblem,
    options: FusionOptions,
    state: SolverState,
    kv: Vec<DVector<f64>>,
    converged: bool,
}

impl<'p> FusionSolver<'p> {
    pub fn new(problem: &'p FusionProblem, options: FusionOptions) -> Result<Self> {
        let mut state = SolverState::initial(problem)?;
        let kv: Vec<DVector<f64>> = state.v.iter().map(|v| problem.kernel.apply(v)).collect();
        let dual0 = (0..problem.arrays())
            .map(|j| dual_term(problem, j, &state.lambda[j], &state.u[j], &kv[j]))
            .sum();
        state.diagnostics.dual_history.push(dual0);
        Ok(Self {
            problem,
            options,
            state,
            kv,
            converged: false,
        })
    }

    pub fn state(&self) -> &SolverState {
        &self.state
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// One outer sweep: Newton solve per array, barycenter update, then
    /// (unless converged) the `v_j` update.
    ///
    /// On convergence `v_j` is left at the values the last Newton solves
    /// used, so each block residual holds exactly at the returned state.
    pub fn sweep(&mut self) -> Result<SweepOutcome> {
        let p = self.problem;
        let o = self.options;
        let mut ktu = Vec::with_capacity(p.arrays());
        for j in 0..p.arrays() {
            let sol = newton_with_basis(
                p.operator(j),
                &p.bases[j],
                p.observation(j),
                &self.kv[j],
                p.epsilon,
                p.gamma,
                &self.state.lambda[j],
                o.newton_tol,
                o.max_newton,
            )
            .map_err(|e| Error::ArrayBlock {
                array: j,
                source: Box::new(e),
            })?;
            self.state.diagnostics.newton_iterations[j] += sol.iterations;
            self.state.diagnostics.newton_residuals[j] = sol.residual;
            ktu.push(p.kernel.apply_transpose(&sol.u));
            self.state.lambda[j] = sol.lambda;
            self.state.u[j] = sol.u;
        }
        let y = geometric_mean(&ktu)?;
        let change = (&y - &self.state.barycenter).lp_norm(1) / y.lp_norm(1);
        self.state.barycenter = y;
        self.state.diagnostics.outer_iterations += 1;
        self.state.diagnostics.change_history.push(change);

        let at_solution = self.state.diagnostics.newton_residuals.iter().all(|&r| r <= o.newton_tol);
        let converged = at_solution && change <= o.outer_tol && self.state.diagnostics.outer_iterations > 1;
        // keep v fixed on the final sweep so the returned state solves the
        // Newton block exactly
        let last = converged || self.state.diagnostics.outer_iterations >= o.max_outer;
        if !last {
            for j in 0..p.arrays() {
                self.state.v[j] = divide_positive(&self.state.barycenter, &ktu[j])?;
                self.kv[j] = p.kernel.apply(&self.state.v[j]);
            }
        }
        let dual = (0..p.arrays())
            .map(|j| dual_term(p, j, &self.state.lambda[j], &self.state.u[j], &self.kv[j]))
            .sum();
        self.state.diagnostics.dual_history.push(dual);
        self.converged = converged;
        Ok(SweepOutcome { change, converged })
    }

    /// Sweep until convergence or `max_outer`; never fails on
    /// non-convergence (check [`FusionResult::converged`]).
    pub fn run(mut self) -> Result<FusionResult> {
        while !self.converged && self.state.diagnostics.outer_iterations < self.options.max_outer {
            self.sweep()?;
        }
        Ok(self.into_result())
    }

    pub fn into_result(self) -> FusionResult {
        let p = self.problem;
        let marginals = self
            .state
            .u
            .iter()
            .zip(&self.kv)
            .map(|(u, kv)| u.component_mul(kv))
            .collect();
        let slacks = self
            .state
            .lambda
            .iter()
            .map(|l| -l / (2.0 * p.gamma))
            .collect();
        let barycenter = Spectrum::new(self.state.barycenter.clone())
            .unwrap_or_else(|_| Spectrum::zeros(p.grid_len()));
        FusionResult {
            barycenter,
            marginals,
            slacks,
            converged: self.converged,
            state: self.state,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionResult {
    pub barycenter: Spectrum,
    /// Per-array spectra `phi_j = u_j ⊙ K v_j`.
    pub marginals: Vec<DVector<f64>>,
    /// `Delta_j = -lambda_j / (2 gamma)`
    pub slacks: Vec<DVector<f64>>,
    pub converged: bool,
    pub state: SolverState,
}

impl FusionResult {
    /// `M_j = diag(u_j) K diag(v_j)`
    pub fn plan(&self, problem: &FusionProblem, j: usize) -> TransportPlan {
        TransportPlan::from_scalings(&self.state.u[j], problem.kernel().matrix(), &self.state.v[j])
    }

    pub fn outer_iterations(&self) -> usize {
        self.state.diagnostics.outer_iterations
    }

    /// Write `iteration,dual,change` rows; iteration 0 is the initial state.
    pub fn write_convergence_log<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let d = &self.state.diagnostics;
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iteration", "dual", "relative_change"])?;
        for (i, dual) in d.dual_history.iter().enumerate() {
            let change = if i == 0 { f64::NAN } else { d.change_history[i - 1] };
            w.write_record([i.to_string(), dual.to_string(), change.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Run block ascent to convergence.
pub fn fuse(problem: &FusionProblem, options: FusionOptions) -> Result<FusionResult> {
    let result = FusionSolver::new(problem, options)?.run()?;
    if !result.converged {
        let last_change = result
            .state
            .diagnostics
            .change_history
            .last()
            .copied()
            .unwrap_or(f64::NAN);
        return Err(Error::FusionNotConverged {
            iterations: result.outer_iterations(),
            last_change,
        });
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{build_forward_operator, ArrayGeometry};
    use crate::simulate::SimRng;
    use crate::spatial::{cost_matrix, make_grid, Bounds, Point, Resolution};
    use crate::transport::transport_cost;
    use rand::{Rng, SeedableRng};

    fn identity_kernel_cost(n: usize) -> CostMatrix {
        CostMatrix::from_matrix(DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1e6 })).unwrap()
    }

    /// Two 3-sensor arrays on a 4x4 grid observing a random sparse spectrum.
    fn small_problem(seed: u64, gamma: f64) -> FusionProblem {
        let grid = make_grid(Bounds::square(0.5).unwrap(), Resolution::square(4)).unwrap();
        let arrays = [
            ArrayGeometry::new(
                "left",
                vec![Point::new(-1.0, -0.2), Point::new(-1.0, 0.0), Point::new(-1.0, 0.2)],
                0.4,
            )
            .unwrap(),
            ArrayGeometry::new(
                "below",
                vec![Point::new(-0.2, -1.0), Point::new(0.0, -1.0), Point::new(0.2, -1.1)],
                0.4,
            )
            .unwrap(),
        ];
        let mut rng = SimRng::seed_from_u64(seed);
        let truth = DVector::from_fn(grid.len(), |_, _| if rng.random::<f64>() < 0.2 { rng.random::<f64>() } else { 0.0 });
        let truth = if truth.sum() == 0.0 { DVector::from_element(grid.len(), 0.1) } else { truth };
        let ops: Vec<DMatrix<f64>> = arrays
            .iter()
            .map(|g| build_forward_operator(g, &grid).unwrap().matrix().clone())
            .collect();
        let obs = ops.iter().map(|a| a * &truth).collect();
        FusionProblem::new(ops, obs, cost_matrix(&grid), 0.1, gamma).unwrap()
    }

    fn scalar(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn newton_zero_is_a_fixed_point() {
        let p = small_problem(1, 0.5);
        let kv = DVector::from_element(p.grid_len(), 0.3);
        let r = p.operator(0) * &kv;
        let zero = DVector::zeros(r.len());
        let s = newton_solve_lambda(p.operator(0), &r, &kv, 0.1, 0.5, &zero, 1e-10, 10).unwrap();
        assert_eq!(s.iterations, 0);
        assert_eq!(s.lambda, zero);
    }

    #[test]
    fn newton_scalar_root_matches_bisection() {
        // exp(l) - 2 + l / 2 = 0
        let g = |l: f64| l.exp() - 2.0 + l / 2.0;
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid
            } else {
                lo = mid
            }
        }
        let a = DMatrix::from_element(1, 1, 1.0);
        let s = newton_solve_lambda(&a, &scalar(2.0), &scalar(1.0), 1.0, 1.0, &scalar(0.0), 1e-13, 50).unwrap();
        assert!((s.lambda[0] - lo).abs() < 1e-12, "{} vs {lo}", s.lambda[0]);
        assert!((s.u[0] - lo.exp()).abs() < 1e-12);
    }

    #[test]
    fn newton_small_gamma_limit() {
        // lambda / (2 gamma) dominates: lambda ~ 2 gamma (r - A K v)
        let p = small_problem(2, 1.0);
        let kv = DVector::from_element(p.grid_len(), 0.2);
        let r = p.observation(0);
        let gamma = 1e-9;
        let zero = DVector::zeros(r.len());
        let s = newton_solve_lambda(p.operator(0), r, &kv, 0.1, gamma, &zero, 1e-12, 50).unwrap();
        let expected = (r - p.operator(0) * &kv) * (2.0 * gamma);
        assert!((&s.lambda - &expected).amax() <= 1e-6 * expected.amax());
    }

    #[test]
    fn newton_recovers_root_after_overflowing_warm_start() {
        let a = DMatrix::from_element(1, 1, 1.0);
        let s = newton_solve_lambda(&a, &scalar(2.0), &scalar(1.0), 1.0, 1.0, &scalar(1e6), 1e-12, 50).unwrap();
        assert!(s.residual <= 1e-12);
    }

    #[test]
    fn newton_rejects_bad_inputs() {
        let a = DMatrix::from_element(1, 1, 1.0);
        assert!(newton_solve_lambda(&a, &scalar(1.0), &scalar(0.0), 1.0, 1.0, &scalar(0.0), 1e-9, 5).is_err());
        assert!(newton_solve_lambda(&a, &scalar(1.0), &scalar(1.0), 0.0, 1.0, &scalar(0.0), 1e-9, 5).is_err());
        assert!(matches!(
            newton_solve_lambda(&a, &scalar(3.0), &scalar(1.0), 1.0, 1.0, &scalar(0.0), 1e-9, 0),
            Err(Error::NewtonNotConverged { iterations: 0, .. })
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = small_problem(3, 0.05);
        let a = p.operator(1);
        let kv = DVector::from_element(p.grid_len(), 0.7);
        let r = p.observation(1);
        let mut rng = SimRng::seed_from_u64(9);
        let lambda = DVector::from_fn(a.nrows(), |_, _| rng.random_range(-0.01..0.01));
        let e0 = eval_block(a, r, &kv, p.epsilon, p.gamma, &lambda);
        let jac = block_jacobian(a, &e0.weights, p.epsilon, p.gamma);
        let h = 1e-7;
        for col in [0, 3, a.nrows() - 1] {
            let mut l = lambda.clone();
            l[col] += h;
            let e1 = eval_block(a, r, &kv, p.epsilon, p.gamma, &l);
            let fd = (e1.f - &e0.f) / h;
            assert!((fd - jac.column(col)).amax() <= 1e-4 * jac.amax());
        }
    }

    #[test]
    fn reduced_jacobian_equals_dense() {
        let p = small_problem(4, 0.3);
        for j in 0..2 {
            let a = p.operator(j);
            let basis = RowBasis::new(a);
            // 3 sensors: 3 diagonal reals + 3 upper reals + 3 upper imaginaries
            assert_eq!(basis.basis.nrows(), 9);
            let w = DVector::from_fn(a.ncols(), |i, _| 0.1 + i as f64);
            let dense = block_jacobian(a, &w, 0.2, 0.3);
            let fast = basis.jacobian(&w, 0.2, 0.3);
            assert!((dense - &fast).amax() <= 1e-12 * fast.amax());
        }
        let generic = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, -2.0, 0.0, 0.0]);
        let b = RowBasis::new(&generic);
        assert_eq!(b.basis.nrows(), 1);
        assert_eq!(b.map, vec![Some((0, 1.0)), Some((0, -1.0)), None]);
    }

    #[test]
    fn barycenter_and_v_updates() {
        let k = gibbs_kernel(&identity_kernel_cost(3), 1.0).unwrap();
        let u1 = DVector::from_vec(vec![1.0, 4.0, 9.0]);
        let u2 = DVector::from_vec(vec![4.0, 1.0, 1.0]);
        let y = update_barycenter(&[u1.clone(), u2], &k).unwrap();
        assert!((y - DVector::from_vec(vec![2.0, 2.0, 3.0])).amax() < 1e-14);
        let y1 = update_barycenter(std::slice::from_ref(&u1), &k).unwrap();
        assert!((y1 - &u1).amax() < 1e-14);

        let p = small_problem(5, 1.0);
        let u = DVector::from_fn(p.grid_len(), |i, _| 1.0 + i as f64);
        let y = update_barycenter(&[u.clone(), u.clone()], p.kernel()).unwrap();
        assert!((&y - p.kernel().apply_transpose(&u)).amax() <= 1e-12 * y.amax());
        let v = update_v(&y, &u, p.kernel()).unwrap();
        let v2 = update_v(&(&y * 2.0), &u, p.kernel()).unwrap();
        assert!((v2 - v * 2.0).amax() < 1e-12);
        assert!(update_barycenter(&[], p.kernel()).is_err());
    }

    #[test]
    fn dual_examples() {
        // C = 0 gives K = 1 1^T; at the initial state the dual vanishes
        let n = 3;
        let ops = vec![DMatrix::identity(n, n)];
        let obs = vec![DVector::from_element(n, 1.0)];
        let zero_cost = CostMatrix::from_matrix(DMatrix::zeros(n, n)).unwrap();
        let p = FusionProblem::new(ops, obs, zero_cost, 0.5, 1.0).unwrap();
        let s = SolverState::initial(&p).unwrap();
        assert!(dual_objective(&s, &p).abs() < 1e-12);
        // lambda = 1: 1^T r - eps n^2 - n / 4 + eps n^2
        let mut s1 = s.clone();
        s1.lambda[0] = DVector::from_element(n, 1.0);
        assert!((dual_objective(&s1, &p) - (3.0 - 0.75)).abs() < 1e-12);
    }

    #[test]
    fn single_array_identity_operator_gives_row_normalized_transport() {
        let n = 5;
        let grid = make_grid(Bounds::square(0.5).unwrap(), Resolution::new(5, 1)).unwrap();
        let cost = cost_matrix(&grid);
        let r = DVector::from_vec(vec![0.1, 0.3, 0.05, 0.4, 0.15]);
        let p = FusionProblem::new(vec![DMatrix::identity(n, n)], vec![r.clone()], cost, 0.2, 1e8).unwrap();
        let res = fuse(&p, FusionOptions::default()).unwrap();
        let k = p.kernel().matrix();
        let k1 = k * DVector::from_element(n, 1.0);
        let expected = k.tr_mul(&r.component_div(&k1));
        assert!((res.barycenter.values() - &expected).amax() <= 1e-6 * expected.amax());

        // two identical arrays: same answer
        let p2 = FusionProblem::new(
            vec![DMatrix::identity(n, n); 2],
            vec![r.clone(), r],
            p.cost().clone(),
            0.2,
            1e8,
        )
        .unwrap();
        let res2 = fuse(&p2, FusionOptions::default()).unwrap();
        assert!((res2.barycenter.values() - &expected).amax() <= 1e-6 * expected.amax());
    }

    #[test]
    fn identity_operators_reduce_to_sinkhorn_barycenter() {
        let grid = make_grid(Bounds::square(0.5).unwrap(), Resolution::square(3)).unwrap();
        let n = grid.len();
        let mut rng = SimRng::seed_from_u64(11);
        // O(1) entries keep the 1/(2 gamma) and Newton-tolerance effects near 1e-9
        let mut marginal = || DVector::from_fn(n, |_, _| rng.random_range(0.5..1.5));
        let r = vec![marginal(), marginal()];
        let p = FusionProblem::new(vec![DMatrix::identity(n, n); 2], r.clone(), cost_matrix(&grid), 0.1, 1e8).unwrap();
        let k = p.kernel().matrix().clone();
        let mut solver = FusionSolver::new(&p, FusionOptions::default()).unwrap();
        let mut v = vec![DVector::from_element(n, 1.0); 2];
        for _ in 0..30 {
            let u: Vec<DVector<f64>> = (0..2).map(|j| r[j].component_div(&(&k * &v[j]))).collect();
            let ktu: Vec<DVector<f64>> = u.iter().map(|uj| k.tr_mul(uj)).collect();
            let y = ktu[0].component_mul(&ktu[1]).map(f64::sqrt);
            for j in 0..2 {
                v[j] = y.component_div(&ktu[j]);
            }
            if solver.sweep().unwrap().converged {
                break;
            }
            let s = solver.state();
            for j in 0..2 {
                assert!((&s.u[j] - &u[j]).amax() <= 1e-8 * u[j].amax());
                assert!((&s.v[j] - &v[j]).amax() <= 1e-8 * v[j].amax());
            }
            let gap = (&s.barycenter - &y).amax();
            assert!(gap <= 1e-8 * y.amax(), "{gap} {}", y.amax());
        }
    }

    #[test]
    fn dual_ascent_is_monotone() {
        for seed in 0..4 {
            let p = small_problem(20 + seed, 0.05);
            let res = FusionSolver::new(&p, FusionOptions { max_outer: 300, ..Default::default() })
                .unwrap()
                .run()
                .unwrap();
            let d = &res.state.diagnostics.dual_history;
            assert!(d.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0)), "seed {seed}");
        }
    }

    #[test]
    fn converged_solution_is_consistent() {
        let p = small_problem(7, 0.05);
        let res = fuse(&p, FusionOptions::default()).unwrap();
        let y = res.barycenter.values();
        for (j, rr) in residuals(&res.state, &p).iter().enumerate() {
            assert!(rr.newton <= 1e-9);
            assert!(rr.agreement <= 1e-5 * y.amax());
            let plan = res.plan(&p, j);
            assert!((plan.row_sums() - &res.marginals[j]).amax() <= 1e-12 * y.amax());
            assert!((plan.col_sums() - y).amax() <= 1e-5 * y.amax());
            let fit = p.operator(j) * &res.marginals[j] - p.observation(j);
            assert!((fit - &res.slacks[j]).amax() <= 1e-8);
        }
        // strong duality
        let primal: f64 = (0..2)
            .map(|j| {
                transport_cost(&res.plan(&p, j), p.cost(), p.epsilon()).unwrap()
                    + p.gamma() * res.slacks[j].norm_squared()
            })
            .sum();
        let dual = dual_objective(&res.state, &p);
        assert!((primal - dual).abs() <= 1e-5 * primal.abs(), "{primal} vs {dual}");
    }

    #[test]
    fn larger_gamma_fits_tighter() {
        for seed in 0..3 {
            let mut last = f64::INFINITY;
            for gamma in [1e-3, 1e-2, 1e-1, 1.0] {
                let p = small_problem(30 + seed, gamma);
                let res = fuse(&p, FusionOptions::default()).unwrap();
                let slack: f64 = res.slacks.iter().map(|d| d.norm_squared()).sum::<f64>().sqrt();
                assert!(slack < last, "seed {seed} gamma {gamma}");
                last = slack;
            }
        }
    }

    #[test]
    fn problem_validation() {
        let cost = identity_kernel_cost(2);
        let a = DMatrix::identity(2, 2);
        let r = DVector::from_element(2, 1.0);
        assert!(FusionProblem::new(vec![], vec![], cost.clone(), 1.0, 1.0).is_err());
        assert!(FusionProblem::new(vec![a.clone()], vec![], cost.clone(), 1.0, 1.0).is_err());
        assert!(FusionProblem::new(vec![a.clone()], vec![r.clone()], cost.clone(), 1.0, 0.0).is_err());
        assert!(FusionProblem::new(vec![a.clone()], vec![r.clone()], cost.clone(), -1.0, 1.0).is_err());
        assert!(FusionProblem::new(vec![a.clone()], vec![DVector::zeros(2)], cost.clone(), 1.0, 1.0).is_err());
        assert!(FusionProblem::new(vec![DMatrix::identity(3, 3)], vec![DVector::zeros(3)], cost, 1.0, 1.0).is_err());
    }

    #[test]
    fn non_convergence_is_reported() {
        let p = small_problem(8, 0.05);
        let opts = FusionOptions { max_outer: 3, ..Default::default() };
        assert!(matches!(fuse(&p, opts), Err(Error::FusionNotConverged { iterations: 3, .. })));
        let res = FusionSolver::new(&p, opts).unwrap().run().unwrap();
        assert!(!res.converged);
        let mut log = Vec::new();
        res.write_convergence_log(&mut log).unwrap();
        assert_eq!(String::from_utf8(log).unwrap().lines().count(), 1 + 4);
    }
}
