//! Small dense convex solvers behind a uniform backend contract.
//!
//! [`qp`] holds a Goldfarb-Idnani dual active-set method for strictly convex
//! QPs and [`socp`] a homogeneous self-dual interior-point method with
//! Nesterov-Todd scaling for second-order cone programs.

pub mod qp;
pub mod socp;

use serde::{Deserialize, Serialize};

pub use qp::{solve_qp, DualActiveSet, QpProblem, QpSolution};
pub use socp::{solve_cone, ConeProgram, ConeProgramDump, ConeSolution, InteriorPoint, SocConstraint, SocDump, VarBound};

use crate::error::Result;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
}

impl SolveStatus {
    pub fn is_optimal(self) -> bool {
        self == SolveStatus::Optimal
    }
}

/// Diagnostics attached to every solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub status: SolveStatus,
    pub iterations: usize,
    /// Largest constraint violation at the returned point.
    pub primal_residual: f64,
    /// Infinity norm of the stationarity residual.
    pub dual_residual: f64,
    /// Complementarity (`s'z` or `lambda'(d - Cx)`).
    pub gap: f64,
    pub wall_time_us: f64,
}

/// Strictly convex QP backend: `min 0.5 x'Hx + g'x  s.t.  Cx <= d`.
pub trait QpBackend<T: Real> {
    fn solve_qp(&mut self, problem: &QpProblem<T>) -> Result<QpSolution<T>>;
}

/// Linear-objective SOCP backend.
pub trait ConeBackend<T: Real> {
    fn solve_cone(&mut self, program: &ConeProgram<T>) -> Result<ConeSolution<T>>;
}

pub(crate) fn elapsed_us(start: std::time::Instant) -> f64 {
    // never report exactly zero
    (start.elapsed().as_secs_f64() * 1e6).max(1e-3)
}
