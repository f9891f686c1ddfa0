//! Goldfarb-Idnani dual active-set method.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{elapsed_us, QpBackend, SolveStatus, SolverReport};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// `min 0.5 x'Hx + g'x  s.t.  Cx <= d`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem<T: Real> {
    pub h: DMatrix<T>,
    pub g: DVector<T>,
    pub c: DMatrix<T>,
    pub d: DVector<T>,
}

impl<T: Real> QpProblem<T> {
    pub fn unconstrained(h: DMatrix<T>, g: DVector<T>) -> Self {
        let n = g.len();
        Self { h, g, c: DMatrix::zeros(0, n), d: DVector::zeros(0) }
    }

    pub fn objective(&self, x: &DVector<T>) -> T {
        T::lit(0.5) * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    fn check(&self) -> Result<()> {
        let n = self.g.len();
        if self.h.shape() != (n, n) || self.c.ncols() != n || self.c.nrows() != self.d.len() {
            return Err(Error::Dimension(format!(
                "qp with H {:?}, g {}, C {:?}, d {}",
                self.h.shape(),
                n,
                self.c.shape(),
                self.d.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T: Real> {
    pub x: DVector<T>,
    /// One non-negative multiplier per inequality row.
    pub multipliers: DVector<T>,
    /// Rows active at the solution, in the order they entered.
    pub active: Vec<usize>,
    pub objective: T,
    pub report: SolverReport,
}

/// Dual active-set solver caching the Hessian factorization between calls.
#[derive(Debug, Clone)]
pub struct DualActiveSet<T: Real> {
    pub max_iterations: usize,
    /// Feasibility tolerance on `Cx - d`, relative to `1 + |d_j|`.
    pub tolerance: T,
    cached_h: Option<DMatrix<T>>,
    h_inv: DMatrix<T>,
    /// Rows to try first, typically the previous solve's active set.
    pub warm_start: Vec<usize>,
}

impl<T: Real> Default for DualActiveSet<T> {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: T::lit(1e-12),
            cached_h: None,
            h_inv: DMatrix::zeros(0, 0),
            warm_start: Vec::new(),
        }
    }
}

impl<T: Real> DualActiveSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    fn factor(&mut self, h: &DMatrix<T>) -> Result<()> {
        if self.cached_h.as_ref() == Some(h) {
            return Ok(());
        }
        let chol = h
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("QP Hessian".into()))?;
        self.h_inv = chol.inverse();
        self.cached_h = Some(h.clone());
        Ok(())
    }

    pub fn solve(&mut self, problem: &QpProblem<T>) -> Result<QpSolution<T>> {
        let start = Instant::now();
        problem.check()?;
        self.factor(&problem.h)?;
        let rows = problem.d.len();
        let hinv = &self.h_inv;

        // constraints in ">=" form: a_j' x >= b_j with a_j = -c_j, b_j = -d_j
        let normal = |j: usize| -> DVector<T> { -problem.c.row(j).transpose() };
        let slack = |x: &DVector<T>, j: usize| -> T { problem.d[j] - problem.c.row(j).dot(&x.transpose()) };
        let tol = |j: usize| self.tolerance * (T::one() + problem.d[j].abs());

        let mut x = -(hinv * &problem.g);
        let mut active: Vec<usize> = Vec::new();
        let mut hinv_n: Vec<DVector<T>> = Vec::new();
        let mut u: Vec<T> = Vec::new();
        let mut iterations = 0;
        let mut status = SolveStatus::Optimal;

        'outer: loop {
            // pick the violated constraint: warm-start rows first, then the worst
            let mut pick: Option<(usize, T)> = None;
            for &j in &self.warm_start {
                if j < rows && !active.contains(&j) {
                    let s = slack(&x, j);
                    if s < -tol(j) {
                        pick = Some((j, s));
                        break;
                    }
                }
            }
            if pick.is_none() {
                for j in 0..rows {
                    if active.contains(&j) {
                        continue;
                    }
                    let s = slack(&x, j);
                    if s < -tol(j) && pick.is_none_or(|(_, best)| s < best) {
                        pick = Some((j, s));
                    }
                }
            }
            let Some((p, _)) = pick else { break };
            let np = normal(p);
            let hinv_np = hinv * &np;
            let mut u_new = T::zero();

            loop {
                iterations += 1;
                if iterations > self.max_iterations {
                    status = SolveStatus::MaxIterations;
                    break 'outer;
                }
                let q = active.len();
                // r = (N' H^-1 N)^-1 N' H^-1 n+, z = H^-1 n+ - H^-1 N r
                let r = if q == 0 {
                    DVector::zeros(0)
                } else {
                    let s_mat = DMatrix::from_fn(q, q, |a, b| normal(active[a]).dot(&hinv_n[b]));
                    let rhs = DVector::from_fn(q, |a, _| hinv_n[a].dot(&np));
                    match s_mat.clone().cholesky() {
                        Some(ch) => ch.solve(&rhs),
                        None => s_mat.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(q)),
                    }
                };
                let mut z = hinv_np.clone();
                for (a, col) in hinv_n.iter().enumerate() {
                    z.axpy(-r[a], col, T::one());
                }

                // partial (dual) step
                let mut t1: Option<(T, usize)> = None;
                for a in 0..q {
                    if r[a] > T::zero() {
                        let t = u[a] / r[a];
                        if t1.is_none_or(|(best, _)| t < best) {
                            t1 = Some((t, a));
                        }
                    }
                }
                // full (primal) step
                let znp = z.dot(&np);
                let zero_dir = z.amax() <= T::lit(1e-13) * (T::one() + hinv_np.amax());
                let t2 = if zero_dir || znp <= T::zero() {
                    None
                } else {
                    Some(-slack(&x, p) / znp)
                };

                match (t1, t2) {
                    (None, None) => {
                        status = SolveStatus::Infeasible;
                        break 'outer;
                    }
                    (Some((t, l)), None) => {
                        for a in 0..q {
                            u[a] -= t * r[a];
                        }
                        u_new += t;
                        active.remove(l);
                        hinv_n.remove(l);
                        u.remove(l);
                    }
                    (t1, Some(t2v)) => {
                        let (t, drop) = match t1 {
                            Some((t1v, l)) if t1v < t2v => (t1v, Some(l)),
                            _ => (t2v, None),
                        };
                        x.axpy(t, &z, T::one());
                        for a in 0..q {
                            u[a] -= t * r[a];
                        }
                        u_new += t;
                        match drop {
                            None => {
                                active.push(p);
                                hinv_n.push(hinv_np);
                                u.push(u_new);
                                continue 'outer;
                            }
                            Some(l) => {
                                active.remove(l);
                                hinv_n.remove(l);
                                u.remove(l);
                            }
                        }
                    }
                }
            }
        }

        let mut multipliers = DVector::zeros(rows);
        for (a, &j) in active.iter().enumerate() {
            multipliers[j] = u[a].max(T::zero());
        }
        let cx = &problem.c * &x;
        let primal = (0..rows).fold(0.0f64, |acc, j| acc.max((cx[j] - problem.d[j]).as_f64()));
        let stationarity = &problem.h * &x + &problem.g + problem.c.transpose() * &multipliers;
        let gap = (0..rows).fold(0.0f64, |acc, j| acc + (multipliers[j] * (problem.d[j] - cx[j])).abs().as_f64());
        let objective = problem.objective(&x);
        Ok(QpSolution {
            x,
            multipliers,
            active,
            objective,
            report: SolverReport {
                status,
                iterations,
                primal_residual: primal,
                dual_residual: if stationarity.is_empty() { 0.0 } else { stationarity.amax().as_f64() },
                gap,
                wall_time_us: elapsed_us(start),
            },
        })
    }
}

impl<T: Real> QpBackend<T> for DualActiveSet<T> {
    fn solve_qp(&mut self, problem: &QpProblem<T>) -> Result<QpSolution<T>> {
        self.solve(problem)
    }
}

/// One-shot convenience wrapper around [`DualActiveSet`].
pub fn solve_qp<T: Real>(problem: &QpProblem<T>) -> Result<QpSolution<T>> {
    DualActiveSet::new().solve(problem)
}
