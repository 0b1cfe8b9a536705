//! Small dense solvers for linearly constrained nonlinear least squares.
//!
//! [`solve_qp`] is a primal active-set method for strictly convex quadratic
//! programs with inequality constraints. [`gauss_newton`] wraps it in a
//! Levenberg-Marquardt damped Gauss-Newton loop: each iteration solves the
//! linearized least-squares step subject to the (linear) constraints, so
//! every iterate stays feasible.

use nalgebra::{DMatrix, DVector};

/// Constraints `rows[i] . x >= rhs[i]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearConstraints {
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

impl LinearConstraints {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: Vec<f64>, rhs: f64) {
        self.rows.push(row);
        self.rhs.push(rhs);
    }

    /// `x[index] >= bound`.
    pub fn push_lower_bound(&mut self, dim: usize, index: usize, bound: f64) {
        let mut row = vec![0.0; dim];
        row[index] = 1.0;
        self.push(row, bound);
    }

    /// `x[index] <= bound`.
    pub fn push_upper_bound(&mut self, dim: usize, index: usize, bound: f64) {
        let mut row = vec![0.0; dim];
        row[index] = -1.0;
        self.push(row, -bound);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Smallest slack `rows[i] . x - rhs[i]`; `+inf` without constraints.
    pub fn min_slack(&self, x: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(r, b)| dot(r, x) - b)
            .fold(f64::INFINITY, f64::min)
    }

    /// Indices of constraints with slack below `tol`.
    pub fn active(&self, x: &[f64], tol: f64) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| dot(&self.rows[i], x) - self.rhs[i] <= tol)
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub working_set: Vec<usize>,
    pub multipliers: Vec<f64>,
    pub changes: usize,
    pub optimal: bool,
}

/// Minimizes `0.5 x'Hx + c'x` subject to `constraints`, starting from the
/// feasible point `x0`. `H` must be positive definite. Stops after
/// `max_changes` working-set changes, returning the best feasible iterate
/// with `optimal = false`.
pub fn solve_qp(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    constraints: &LinearConstraints,
    x0: &[f64],
    max_changes: usize,
) -> QpSolution {
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut working: Vec<usize> = Vec::new();
    let mut changes = 0;
    let scale = x.amax().max(1.0);
    // Set after an unblocked full step: x minimizes over the current working
    // set, whatever rounding leaves in the next computed step.
    let mut at_minimum = false;

    loop {
        let g = h * &x + c;
        let w = working.len();
        let mut kkt = DMatrix::zeros(n + w, n + w);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        for (k, &i) in working.iter().enumerate() {
            for j in 0..n {
                kkt[(j, n + k)] = -constraints.rows[i][j];
                kkt[(n + k, j)] = constraints.rows[i][j];
            }
        }
        let mut rhs = DVector::zeros(n + w);
        rhs.rows_mut(0, n).copy_from(&(-&g));
        let Some(sol) = kkt.lu().solve(&rhs) else {
            return QpSolution {
                x: x.as_slice().to_vec(),
                multipliers: vec![0.0; working.len()],
                working_set: working,
                changes,
                optimal: false,
            };
        };
        let p = sol.rows(0, n).into_owned();
        let lambda: Vec<f64> = sol.rows(n, w).iter().copied().collect();

        if at_minimum || p.amax() <= 1e-15 * scale {
            let (worst, min_lambda) = lambda
                .iter()
                .enumerate()
                .fold((usize::MAX, 0.0), |acc, (k, &l)| if l < acc.1 { (k, l) } else { acc });
            if worst == usize::MAX || min_lambda >= -1e-14 * (1.0 + g.amax()) {
                return QpSolution {
                    x: x.as_slice().to_vec(),
                    working_set: working,
                    multipliers: lambda,
                    changes,
                    optimal: true,
                };
            }
            working.remove(worst);
            at_minimum = false;
        } else {
            let mut alpha = 1.0;
            let mut blocking = None;
            for i in 0..constraints.len() {
                if working.contains(&i) {
                    continue;
                }
                let ap = dot(&constraints.rows[i], p.as_slice());
                if ap < -1e-14 * scale {
                    let slack = dot(&constraints.rows[i], x.as_slice()) - constraints.rhs[i];
                    let step = (slack / -ap).max(0.0);
                    if step < alpha {
                        alpha = step;
                        blocking = Some(i);
                    }
                }
            }
            x += alpha * p;
            match blocking {
                Some(i) => working.push(i),
                None => {
                    at_minimum = true;
                    continue;
                }
            }
        }
        changes += 1;
        if changes >= max_changes {
            let w = working.len();
            return QpSolution {
                x: x.as_slice().to_vec(),
                working_set: working,
                multipliers: vec![0.0; w],
                changes,
                optimal: false,
            };
        }
    }
}

/// A least-squares problem: residual vector and its Jacobian.
pub trait LeastSquares {
    fn residuals(&self, x: &[f64]) -> DVector<f64>;
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64>;

    fn objective(&self, x: &[f64]) -> f64 {
        self.residuals(x).norm_squared()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussNewtonOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the objective by less than this
    /// fraction.
    pub relative_tolerance: f64,
    /// Total working-set changes allowed across all QP subproblems.
    pub max_active_changes: usize,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            relative_tolerance: 1e-10,
            max_active_changes: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussNewtonReport {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub active_changes: usize,
}

/// Damped Gauss-Newton from the feasible point `x0`, every step solved as a
/// constrained QP. Only steps that lower the objective are accepted, so the
/// result is never worse than `x0`.
pub fn gauss_newton<P: LeastSquares + ?Sized>(
    problem: &P,
    constraints: &LinearConstraints,
    x0: &[f64],
    options: &GaussNewtonOptions,
) -> GaussNewtonReport {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut r = problem.residuals(&x);
    let mut f = r.norm_squared();
    let f_floor = 1e-30 * (1.0 + f);
    let mut mu: Option<f64> = None;
    let mut active_changes = 0;
    let mut converged = false;
    let mut iterations = 0;
    let mut small_steps = 0;
    let mut jac = problem.jacobian(&x);

    while iterations < options.max_iterations {
        if f <= f_floor {
            converged = true;
            break;
        }
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let max_diag = (0..n).map(|i| jtj[(i, i)]).fold(0.0, f64::max).max(1e-300);
        let damping = *mu.get_or_insert(1e-3);
        let mut h = jtj.clone();
        for i in 0..n {
            h[(i, i)] += damping * jtj[(i, i)].max(1e-9 * max_diag);
        }
        // Step p with constraints on x + p, i.e. A p >= rhs - A x.
        let mut shifted = constraints.clone();
        for (row, b) in shifted.rows.iter().zip(shifted.rhs.iter_mut()) {
            *b = (*b - dot(row, &x)).min(0.0);
        }
        let budget = options.max_active_changes.saturating_sub(active_changes).max(1);
        let qp = solve_qp(&h, &g, &shifted, &vec![0.0; n], budget);
        active_changes += qp.changes;

        let trial: Vec<f64> = x.iter().zip(&qp.x).map(|(a, p)| a + p).collect();
        let step_norm = qp.x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let x_norm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let r_trial = problem.residuals(&trial);
        let f_trial = r_trial.norm_squared();

        if f_trial < f {
            let rel = (f - f_trial) / f;
            x = trial;
            r = r_trial;
            f = f_trial;
            jac = problem.jacobian(&x);
            mu = Some((damping / 3.0).max(1e-12));
            // A single tiny decrease can come from a heavily damped step;
            // two in a row mean the iteration has settled.
            small_steps = if rel < options.relative_tolerance { small_steps + 1 } else { 0 };
            if small_steps >= 2 {
                converged = true;
                break;
            }
        } else {
            if step_norm <= 1e-15 * (1.0 + x_norm) || damping > 1e16 {
                // No descent direction left: stationary up to rounding.
                converged = true;
                break;
            }
            mu = Some(damping * 4.0);
        }
        if active_changes >= options.max_active_changes {
            break;
        }
    }

    GaussNewtonReport {
        x,
        objective: f,
        iterations,
        converged,
        active_changes,
    }
}
