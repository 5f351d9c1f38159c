//! Damped nonlinear least squares (Levenberg-Marquardt with Marquardt scaling).
//!
//! Minimizes `Σ r_i(p)²` given residuals and an analytic Jacobian. A trial step
//! is accepted only when it strictly lowers the cost, so the sequence of
//! accepted costs is monotone non-increasing.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub trait LeastSquaresProblem {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;
    fn residuals(&self, params: &DVector<f64>, out: &mut DVector<f64>);
    fn jacobian(&self, params: &DVector<f64>, out: &mut DMatrix<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Relative cost decrease fell below the tolerance.
    CostTolerance,
    /// Step length fell below the tolerance.
    StepTolerance,
    /// Cost reached zero to machine precision.
    ExactFit,
    /// No descent direction could be found even with very strong damping.
    Stagnated,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub params: DVector<f64>,
    pub cost: f64,
    pub iterations: usize,
    /// Cost after the initial evaluation and after every accepted step.
    pub cost_history: Vec<f64>,
    pub termination: Termination,
    pub jacobian: DMatrix<f64>,
    pub residuals: DVector<f64>,
}

impl Solution {
    pub fn dof(&self) -> usize {
        self.residuals.len().saturating_sub(self.params.len())
    }

    pub fn reduced_chi2(&self) -> f64 {
        match self.dof() {
            0 => f64::NAN,
            d => self.cost / d as f64,
        }
    }

    /// `(JᵀJ)⁻¹` at the optimum, or `None` if singular.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        covariance_from_jacobian(&self.jacobian)
    }
}

pub fn covariance_from_jacobian(jac: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let jtj = jac.transpose() * jac;
    let n = jtj.nrows();
    // scale to unit diagonal before inverting, otherwise mixed units (MHz vs G/A)
    // make the Cholesky test meaningless
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let d = jtj[(i, i)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    if scale.contains(&0.0) {
        return None;
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| jtj[(i, j)] * scale[i] * scale[j]);
    let svd = scaled.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-13) {
        return None;
    }
    let inv = scaled.cholesky()?.inverse();
    let mut cov = DMatrix::from_fn(n, n, |i, j| inv[(i, j)] * scale[i] * scale[j]);
    // symmetrize
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = m;
            cov[(j, i)] = m;
        }
    }
    Some(cov)
}

/// Indices of parameters that the Jacobian cannot resolve.
///
/// Columns are normalized to unit length first; any parameter with a
/// significant component in a numerically null right-singular vector is
/// reported, as is any all-zero column.
pub fn unidentifiable_params(jac: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let n = jac.ncols();
    let mut normalized = jac.clone();
    let mut flagged = vec![false; n];
    for (j, flag) in flagged.iter_mut().enumerate() {
        let norm = normalized.column(j).norm();
        if norm == 0.0 || !norm.is_finite() {
            *flag = true;
            normalized.column_mut(j).fill(0.0);
        } else {
            normalized.column_mut(j).scale_mut(1.0 / norm);
        }
    }
    if jac.nrows() < n {
        // fewer equations than unknowns: everything coupled is suspect
        return (0..n).collect();
    }
    let svd = normalized.svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let smax = svd.singular_values.max().max(f64::MIN_POSITIVE);
    for (k, s) in svd.singular_values.iter().enumerate() {
        if *s <= rel_tol * smax {
            for j in 0..n {
                if v_t[(k, j)].abs() > 0.1 {
                    flagged[j] = true;
                }
            }
        }
    }
    (0..n).filter(|&j| flagged[j]).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct LevenbergMarquardt {
    pub max_iterations: usize,
    /// Relative tolerance on the cost decrease of an accepted step.
    pub cost_tolerance: f64,
    pub step_tolerance: f64,
    pub initial_lambda: f64,
}

impl Default for LevenbergMarquardt {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            cost_tolerance: 1e-10,
            step_tolerance: 1e-12,
            initial_lambda: 1e-3,
        }
    }
}

impl LevenbergMarquardt {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn with_cost_tolerance(mut self, tol: f64) -> Self {
        self.cost_tolerance = tol;
        self
    }

    pub fn minimize<P: LeastSquaresProblem + ?Sized>(
        &self,
        problem: &P,
        start: DVector<f64>,
    ) -> Result<Solution> {
        let n = problem.n_params();
        let m = problem.n_residuals();
        if start.len() != n {
            return Err(Error::InvalidInput(format!(
                "start vector has {} entries, problem has {n} parameters",
                start.len()
            )));
        }
        let mut p = start;
        let mut r = DVector::zeros(m);
        let mut jac = DMatrix::zeros(m, n);
        problem.residuals(&p, &mut r);
        let mut cost = r.norm_squared();
        if !cost.is_finite() {
            return Err(Error::Numerical("non-finite cost at the starting point".into()));
        }
        problem.jacobian(&p, &mut jac);
        let mut history = vec![cost];
        let mut lambda = self.initial_lambda;
        let mut trial_r = DVector::zeros(m);

        for iteration in 1..=self.max_iterations {
            if cost <= f64::MIN_POSITIVE {
                return Ok(self.finish(p, cost, iteration - 1, history, Termination::ExactFit, jac, r));
            }
            let jtj = jac.transpose() * &jac;
            let grad = jac.transpose() * &r;
            let dmax = jtj.diagonal().max().max(f64::MIN_POSITIVE);
            let mut accepted = false;
            while !accepted {
                let mut a = jtj.clone();
                for i in 0..n {
                    a[(i, i)] += lambda * jtj[(i, i)].max(1e-12 * dmax);
                }
                let step = match a.cholesky() {
                    Some(ch) => ch.solve(&(-&grad)),
                    None => {
                        lambda *= 10.0;
                        if lambda > 1e20 {
                            return Ok(self.finish(p, cost, iteration, history, Termination::Stagnated, jac, r));
                        }
                        continue;
                    }
                };
                let trial = &p + &step;
                problem.residuals(&trial, &mut trial_r);
                let trial_cost = trial_r.norm_squared();
                if trial_cost.is_finite() && trial_cost < cost {
                    let decrease = (cost - trial_cost) / cost;
                    let small_step = step.norm() <= self.step_tolerance * (p.norm() + self.step_tolerance);
                    p = trial;
                    std::mem::swap(&mut r, &mut trial_r);
                    cost = trial_cost;
                    problem.jacobian(&p, &mut jac);
                    history.push(cost);
                    lambda = (lambda / 10.0).max(1e-15);
                    accepted = true;
                    if decrease < self.cost_tolerance {
                        return Ok(self.finish(p, cost, iteration, history, Termination::CostTolerance, jac, r));
                    }
                    if small_step {
                        return Ok(self.finish(p, cost, iteration, history, Termination::StepTolerance, jac, r));
                    }
                } else {
                    lambda *= 10.0;
                    if lambda > 1e16 {
                        return Ok(self.finish(p, cost, iteration, history, Termination::Stagnated, jac, r));
                    }
                }
            }
        }
        Err(Error::NoConvergence {
            iterations: self.max_iterations,
            cost,
            last: p.iter().copied().collect(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        params: DVector<f64>,
        cost: f64,
        iterations: usize,
        cost_history: Vec<f64>,
        termination: Termination,
        jacobian: DMatrix<f64>,
        residuals: DVector<f64>,
    ) -> Solution {
        Solution {
            params,
            cost,
            iterations,
            cost_history,
            termination,
            jacobian,
            residuals,
        }
    }
}

/// Residual/Jacobian pair built from closures; handy for small models.
pub struct ClosureProblem<R, J> {
    pub n_params: usize,
    pub n_residuals: usize,
    pub residuals: R,
    pub jacobian: J,
}

impl<R, J> LeastSquaresProblem for ClosureProblem<R, J>
where
    R: Fn(&DVector<f64>, &mut DVector<f64>),
    J: Fn(&DVector<f64>, &mut DMatrix<f64>),
{
    fn n_params(&self) -> usize {
        self.n_params
    }
    fn n_residuals(&self) -> usize {
        self.n_residuals
    }
    fn residuals(&self, params: &DVector<f64>, out: &mut DVector<f64>) {
        (self.residuals)(params, out)
    }
    fn jacobian(&self, params: &DVector<f64>, out: &mut DMatrix<f64>) {
        (self.jacobian)(params, out)
    }
}
