//! Entropic optimal transport between two spectra.
//!
//! The regularized problem is `min <C, M> + eps * D(M)` over plans with row
//! sums `phi0` and column sums `phi1`, where
//! `D(M) = sum (m log m - m + 1)` with `0 log 0 = 0`. Its solution has the
//! scaling form `M = diag(u) K diag(v)` with `K = exp(-C / eps)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::spatial::CostMatrix;
use crate::spectrum::Spectrum;

/// Entries at or below this are treated as underflowed.
pub const UNDERFLOW_THRESHOLD: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct GibbsKernel {
    matrix: DMatrix<f64>,
    epsilon: f64,
    underflowed: usize,
    // (Kx, Ky) with K = Ky ⊗ Kx on tensor grids
    factors: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl GibbsKernel {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Number of entries at or below [`UNDERFLOW_THRESHOLD`].
    pub fn underflowed(&self) -> usize {
        self.underflowed
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn is_separable(&self) -> bool {
        self.factors.is_some()
    }

    /// `K v`
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.factors {
            Some((kx, ky)) => separable_apply(kx, ky, v),
            None => &self.matrix * v,
        }
    }

    /// `K^T u`
    pub fn apply_transpose(&self, u: &DVector<f64>) -> DVector<f64> {
        match &self.factors {
            // both factors are symmetric
            Some((kx, ky)) => separable_apply(kx, ky, u),
            None => self.matrix.tr_mul(u),
        }
    }
}

// index k = iy * nx + ix, so v reshapes column-major to an nx x ny matrix
fn separable_apply(kx: &DMatrix<f64>, ky: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let (nx, ny) = (kx.nrows(), ky.nrows());
    let m = DMatrix::from_column_slice(nx, ny, v.as_slice());
    let out = kx * m * ky;
    DVector::from_column_slice(out.as_slice())
}

fn axis_kernel(xs: &[f64], epsilon: f64) -> DMatrix<f64> {
    let n = xs.len();
    DMatrix::from_fn(n, n, |i, j| (-(xs[i] - xs[j]).powi(2) / epsilon).exp())
}

pub fn gibbs_kernel(cost: &CostMatrix, epsilon: f64) -> Result<GibbsKernel> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let matrix = cost.matrix().map(|c| (-c / epsilon).exp());
    let underflowed = matrix.iter().filter(|&&k| k <= UNDERFLOW_THRESHOLD).count();
    if underflowed > 0 {
        let n = matrix.nrows();
        let dead_row = (0..n).find(|&i| matrix.row(i).iter().all(|&k| k <= UNDERFLOW_THRESHOLD));
        let dead_col = (0..n).find(|&j| matrix.column(j).iter().all(|&k| k <= UNDERFLOW_THRESHOLD));
        if let Some(i) = dead_row {
            return Err(Error::KernelUnderflow(format!("row {i} is entirely zero")));
        }
        if let Some(j) = dead_col {
            return Err(Error::KernelUnderflow(format!("column {j} is entirely zero")));
        }
        log::debug!("Gibbs kernel: {underflowed} entries underflowed at epsilon {epsilon}");
    }
    let factors = cost
        .axes()
        .map(|(xs, ys)| (axis_kernel(xs, epsilon), axis_kernel(ys, epsilon)));
    Ok(GibbsKernel {
        matrix,
        epsilon,
        underflowed,
        factors,
    })
}

/// Nonnegative transport plan, `plan[(k, l)]` = mass moved from `x_k` to `x_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan(DMatrix<f64>);

impl TransportPlan {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter(
                "plan entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self(m))
    }

    /// `diag(u) K diag(v)`
    pub fn from_scalings(u: &DVector<f64>, kernel: &DMatrix<f64>, v: &DVector<f64>) -> Self {
        let mut m = kernel.clone();
        for (mut col, &vj) in m.column_iter_mut().zip(v.iter()) {
            col.component_mul_assign(u);
            col *= vj;
        }
        Self(m)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn row_sums(&self) -> DVector<f64> {
        self.0.column_sum()
    }

    pub fn col_sums(&self) -> DVector<f64> {
        self.0.row_sum().transpose()
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Dense CSV, one plan row per line, no header.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for row in self.0.row_iter() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `D(M) = sum (m log m - m + 1)` with `0 log 0 = 0`.
pub fn entropy(plan: &DMatrix<f64>) -> f64 {
    plan.iter()
        .map(|&m| if m > 0.0 { m * m.ln() - m + 1.0 } else { 1.0 })
        .sum()
}

/// `<C, M>`
pub fn transport_part(plan: &DMatrix<f64>, cost: &DMatrix<f64>) -> f64 {
    plan.dot(cost)
}

/// Regularized objective `<C, M> + eps * D(M)`.
pub fn transport_cost(plan: &TransportPlan, cost: &CostMatrix, epsilon: f64) -> Result<f64> {
    if plan.matrix().shape() != cost.matrix().shape() {
        return Err(Error::DimensionMismatch(format!(
            "plan is {:?}, cost is {:?}",
            plan.matrix().shape(),
            cost.matrix().shape()
        )));
    }
    Ok(transport_part(plan.matrix(), cost.matrix()) + epsilon * entropy(plan.matrix()))
}

#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub plan: TransportPlan,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    /// Regularized objective at the returned plan.
    pub cost: f64,
    pub iterations: usize,
    pub row_residual: f64,
    pub col_residual: f64,
    /// Row-marginal l1 violation over total mass after each iteration.
    pub residual_history: Vec<f64>,
}

impl SinkhornSolution {
    pub fn transport_part(&self, cost: &CostMatrix) -> f64 {
        transport_part(self.plan.matrix(), cost.matrix())
    }
}

fn relative_residual(achieved: &DVector<f64>, target: &DVector<f64>, mass: f64) -> f64 {
    (achieved - target).amax() / mass
}

/// Classical two-marginal Sinkhorn scaling.
///
/// Residuals are `|marginal - target|_inf / total mass`; iteration stops once
/// both are at most `tol`.
pub fn sinkhorn(
    phi0: &Spectrum,
    phi1: &Spectrum,
    cost: &CostMatrix,
    epsilon: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SinkhornSolution> {
    let n = cost.len();
    if phi0.len() != n || phi1.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "marginals have lengths {} and {}, cost is {n}x{n}",
            phi0.len(),
            phi1.len()
        )));
    }
    let (m0, m1) = (phi0.total(), phi1.total());
    if !(m0 > 0.0 && m1 > 0.0) {
        return Err(Error::InvalidSpectrum("marginal totals must be positive".into()));
    }
    if (m0 - m1).abs() > 1e-9 * m0.max(m1) {
        return Err(Error::UnbalancedMarginals(m0, m1));
    }
    let kernel = gibbs_kernel(cost, epsilon)?;
    let k = kernel.matrix();
    let a = phi0.values();
    let b = phi1.values();

    let mut u;
    let mut v = DVector::from_element(n, 1.0);
    let mut history = Vec::new();
    let (mut row_res, mut col_res) = (f64::INFINITY, f64::INFINITY);

    for it in 1..=max_iter {
        let kv = k * &v;
        u = safe_divide(a, &kv)?;
        let ktu = k.tr_mul(&u);
        v = safe_divide(b, &ktu)?;

        let kv = k * &v;
        let ktu = k.tr_mul(&u);
        row_res = relative_residual(&u.component_mul(&kv), a, m0);
        col_res = relative_residual(&v.component_mul(&ktu), b, m1);
        history.push((u.component_mul(&kv) - a).lp_norm(1) / m0);

        if row_res <= tol && col_res <= tol {
            let plan = TransportPlan::from_scalings(&u, k, &v);
            let cost_value = transport_cost(&plan, cost, epsilon)?;
            return Ok(SinkhornSolution {
                plan,
                u,
                v,
                cost: cost_value,
                iterations: it,
                row_residual: row_res,
                col_residual: col_res,
                residual_history: history,
            });
        }
    }
    Err(Error::SinkhornNotConverged {
        iterations: max_iter,
        row_residual: row_res,
        col_residual: col_res,
    })
}

/// `num ./ den`, with `0 / 0 = 0` for empty marginal cells.
fn safe_divide(num: &DVector<f64>, den: &DVector<f64>) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(num.len());
    for i in 0..num.len() {
        if num[i] == 0.0 {
            continue;
        }
        if den[i] <= 0.0 || !den[i].is_finite() {
            return Err(Error::Numerical(format!(
                "scaling denominator {} at index {i}; kernel underflow?",
                den[i]
            )));
        }
        out[i] = num[i] / den[i];
    }
    Ok(out)
}

/// Largest marginal size [`lp_transport_oracle`] accepts.
pub const LP_ORACLE_MAX: usize = 6;

/// Exact unregularized transport cost by enumerating the basic feasible
/// solutions of the transportation polytope.
///
/// Every basis of the polytope is a spanning tree of the complete bipartite
/// graph between source and target cells; the tree determines the flows
/// uniquely by leaf elimination, and the optimum is attained at a feasible
/// (nonnegative) one.
pub fn lp_transport_oracle(phi0: &[f64], phi1: &[f64], cost: &DMatrix<f64>) -> Result<f64> {
    let (n0, n1) = (phi0.len(), phi1.len());
    if n0 == 0 || n1 == 0 {
        return Err(Error::InvalidSpectrum("empty marginal".into()));
    }
    if n0 > LP_ORACLE_MAX || n1 > LP_ORACLE_MAX {
        return Err(Error::TooLarge(format!(
            "{n0}x{n1} exceeds the {LP_ORACLE_MAX}x{LP_ORACLE_MAX} enumeration limit"
        )));
    }
    if cost.shape() != (n0, n1) {
        return Err(Error::DimensionMismatch(format!(
            "cost is {:?}, marginals are {n0} and {n1}",
            cost.shape()
        )));
    }
    if phi0.iter().chain(phi1).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidSpectrum("marginals must be nonnegative".into()));
    }
    let (m0, m1): (f64, f64) = (phi0.iter().sum(), phi1.iter().sum());
    if (m0 - m1).abs() > 1e-9 * m0.max(m1).max(1.0) {
        return Err(Error::UnbalancedMarginals(m0, m1));
    }

    let mut search = TreeSearch {
        n0,
        n1,
        supply: phi0.iter().chain(phi1).copied().collect(),
        cost,
        tol: 1e-12 * m0.max(1.0),
        chosen: Vec::with_capacity(n0 + n1 - 1),
        best: f64::INFINITY,
    };
    let parent: Vec<usize> = (0..n0 + n1).collect();
    search.extend(0, parent);
    if search.best.is_finite() {
        Ok(search.best)
    } else {
        Err(Error::Numerical("no feasible basis found".into()))
    }
}

struct TreeSearch<'a> {
    n0: usize,
    n1: usize,
    supply: Vec<f64>,
    cost: &'a DMatrix<f64>,
    tol: f64,
    chosen: Vec<usize>,
    best: f64,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

impl TreeSearch<'_> {
    fn extend(&mut self, next_edge: usize, parent: Vec<usize>) {
        let needed = self.n0 + self.n1 - 1;
        let total_edges = self.n0 * self.n1;
        if self.chosen.len() == needed {
            self.evaluate();
            return;
        }
        let remaining = needed - self.chosen.len();
        for e in next_edge..total_edges {
            if total_edges - e < remaining {
                break;
            }
            let (i, j) = (e / self.n1, self.n0 + e % self.n1);
            let mut p = parent.clone();
            let (ri, rj) = (find(&mut p, i), find(&mut p, j));
            if ri == rj {
                continue;
            }
            p[ri] = rj;
            self.chosen.push(e);
            self.extend(e + 1, p);
            self.chosen.pop();
        }
    }

    fn evaluate(&mut self) {
        let nodes = self.n0 + self.n1;
        let mut residual = self.supply.clone();
        let mut degree = vec![0usize; nodes];
        let ends: Vec<(usize, usize)> = self
            .chosen
            .iter()
            .map(|&e| (e / self.n1, self.n0 + e % self.n1))
            .collect();
        for &(i, j) in &ends {
            degree[i] += 1;
            degree[j] += 1;
        }
        let mut used = vec![false; ends.len()];
        let mut total = 0.0;
        for _ in 0..ends.len() {
            // a spanning tree always has a leaf among its remaining edges
            let Some((idx, leaf, other)) = ends.iter().enumerate().find_map(|(idx, &(i, j))| {
                if used[idx] {
                    None
                } else if degree[i] == 1 {
                    Some((idx, i, j))
                } else if degree[j] == 1 {
                    Some((idx, j, i))
                } else {
                    None
                }
            }) else {
                return;
            };
            let flow = residual[leaf];
            if flow < -self.tol {
                return;
            }
            used[idx] = true;
            degree[leaf] -= 1;
            degree[other] -= 1;
            residual[other] -= flow;
            residual[leaf] = 0.0;
            let (i, j) = ends[idx];
            total += flow.max(0.0) * self.cost[(i, j - self.n0)];
        }
        if total < self.best {
            self.best = total;
        }
    }
}
