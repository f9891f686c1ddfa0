//! Condensed flat MPC over the discretized chains of integrators.
//!
//! Decision variables are the flat inputs `v_0..v_{T-1}`; states are
//! eliminated through `z_k = A^k z_0 + sum_i A^{k-1-i} B v_i`. The cost is
//! `sum_{k=1}^T e_k' Q e_k + sum_{k=0}^{T-1} (v_k - v_ref,k)' R (v_k - v_ref,k)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{DualActiveSet, QpProblem, SolveStatus, SolverReport};
use crate::error::{Error, Result};
use crate::flat::DiscreteFlatLti;
use crate::scalar::Real;

/// `h' z <= b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace<T> {
    pub h: Vec<T>,
    pub b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSetup<T: Real> {
    pub lti: DiscreteFlatLti<T>,
    pub q: DMatrix<T>,
    pub r: DMatrix<T>,
    pub horizon: usize,
    pub constraints: Vec<HalfSpace<T>>,
    /// Soften each half-space with one slack priced `w s + w s^2`.
    pub slack_penalty: Option<T>,
}

impl<T: Real> MpcSetup<T> {
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.lti.n_z(), self.lti.m());
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        if self.q.shape() != (n, n) || self.r.shape() != (m, m) {
            return Err(Error::Dimension("weight shapes do not match the flat system".into()));
        }
        let spec = &self.lti.spec;
        for r in 0..n {
            for c in 0..n {
                if spec.chain_of(r) != spec.chain_of(c) && self.q[(r, c)] != T::zero() {
                    return Err(Error::InvalidArgument("Q must be block diagonal over the chains".into()));
                }
            }
        }
        for i in 0..m {
            for j in 0..m {
                if i != j && self.r[(i, j)] != T::zero() {
                    return Err(Error::InvalidArgument("R must be diagonal".into()));
                }
            }
        }
        if self.q.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("Q".into()));
        }
        if self.r.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("R".into()));
        }
        for (j, c) in self.constraints.iter().enumerate() {
            if c.h.len() != n || !c.b.is_finite() || c.h.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("half-space {j} is malformed")));
            }
        }
        if let Some(w) = self.slack_penalty {
            if !(w > T::zero()) {
                return Err(Error::InvalidArgument("slack penalty must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution<T: Real> {
    /// Stage-`k` flat state paired with `v_star` (the GP query point).
    pub z_star: DVector<T>,
    pub v_star: DVector<T>,
    /// Predicted state at `k + 1`.
    pub z_next: DVector<T>,
    /// Predicted states `z_0..z_T`.
    pub states: Vec<DVector<T>>,
    pub inputs: Vec<DVector<T>>,
    pub status: SolveStatus,
    pub objective: T,
    /// Largest half-space slack (zero without softening).
    pub slack: T,
    /// Active half-space rows, indexed `k * n_c + j` for state `k + 1`.
    pub active: Vec<usize>,
    pub report: SolverReport,
}

/// Flat MPC with the condensed Hessian and prediction matrices cached.
#[derive(Debug, Clone)]
pub struct FlatMpc<T: Real> {
    pub setup: MpcSetup<T>,
    /// `[A; A^2; ..; A^T]`.
    phi: DMatrix<T>,
    /// Block lower-triangular input-to-state map.
    gamma: DMatrix<T>,
    /// `Qbar Gamma`.
    q_gamma: DMatrix<T>,
    hessian: DMatrix<T>,
    solver: DualActiveSet<T>,
    previous_active: Vec<usize>,
}

impl<T: Real> FlatMpc<T> {
    pub fn new(setup: MpcSetup<T>) -> Result<Self> {
        setup.validate()?;
        let (n, m, t) = (setup.lti.n_z(), setup.lti.m(), setup.horizon);
        let a = &setup.lti.a;
        let b = &setup.lti.b;
        let mut phi = DMatrix::zeros(n * t, n);
        let mut power = DMatrix::identity(n, n);
        // a_pow_b[k] = A^k B
        let mut a_pow_b = Vec::with_capacity(t);
        for k in 0..t {
            a_pow_b.push(&power * b);
            power = a * &power;
            phi.view_mut((k * n, 0), (n, n)).copy_from(&power);
        }
        let mut gamma = DMatrix::zeros(n * t, m * t);
        for k in 0..t {
            for i in 0..=k {
                gamma.view_mut((k * n, i * m), (n, m)).copy_from(&a_pow_b[k - i]);
            }
        }
        let mut q_gamma = DMatrix::zeros(n * t, m * t);
        for k in 0..t {
            let rows = gamma.rows(k * n, n);
            q_gamma.view_mut((k * n, 0), (n, m * t)).copy_from(&(&setup.q * rows));
        }
        let mut hessian = gamma.transpose() * &q_gamma;
        for k in 0..t {
            let mut blk = hessian.view_mut((k * m, k * m), (m, m));
            blk += &setup.r;
        }
        // 2 (G'QG + R), symmetrized
        hessian = &hessian + hessian.transpose();
        let n_slack = if setup.slack_penalty.is_some() { setup.constraints.len() } else { 0 };
        if n_slack > 0 {
            let w = setup.slack_penalty.unwrap_or_else(T::one);
            let dim = m * t + n_slack;
            let mut full = DMatrix::zeros(dim, dim);
            full.view_mut((0, 0), (m * t, m * t)).copy_from(&hessian);
            for j in 0..n_slack {
                full[(m * t + j, m * t + j)] = T::lit(2.0) * w;
            }
            hessian = full;
        }
        Ok(Self { setup, phi, gamma, q_gamma, hessian, solver: DualActiveSet::new(), previous_active: Vec::new() })
    }

    /// Condensed Hessian `2 (Gamma' Qbar Gamma + Rbar)` (plus slack weights).
    pub fn hessian(&self) -> &DMatrix<T> {
        &self.hessian
    }

    fn n_slack(&self) -> usize {
        if self.setup.slack_penalty.is_some() {
            self.setup.constraints.len()
        } else {
            0
        }
    }

    /// QP in the stacked inputs (and slacks) for the given state and reference.
    ///
    /// `z_ref` holds `T + 1` states starting at the current stage and `v_ref`
    /// holds `T` inputs.
    pub fn build_qp(&self, z_hat: &DVector<T>, z_ref: &[DVector<T>], v_ref: &[DVector<T>]) -> Result<QpProblem<T>> {
        let (n, m, t) = (self.setup.lti.n_z(), self.setup.lti.m(), self.setup.horizon);
        if z_hat.len() != n {
            return Err(Error::Dimension(format!("flat state of length {}", z_hat.len())));
        }
        if z_ref.len() != t + 1 || v_ref.len() != t {
            return Err(Error::Dimension(format!(
                "reference window of {} states / {} inputs for horizon {t}",
                z_ref.len(),
                v_ref.len()
            )));
        }
        if z_ref.iter().any(|z| z.len() != n) || v_ref.iter().any(|v| v.len() != m) {
            return Err(Error::Dimension("reference entries have the wrong size".into()));
        }
        let free = &self.phi * z_hat;
        let mut dev = DVector::zeros(n * t);
        for k in 0..t {
            dev.rows_mut(k * n, n).copy_from(&(free.rows(k * n, n) - &z_ref[k + 1]));
        }
        let vr = DVector::from_iterator(m * t, v_ref.iter().flat_map(|v| v.iter().copied()));
        let mut r_vr = DVector::zeros(m * t);
        for k in 0..t {
            r_vr.rows_mut(k * m, m).copy_from(&(&self.setup.r * vr.rows(k * m, m)));
        }
        let g_in = (self.q_gamma.transpose() * &dev - r_vr) * T::lit(2.0);

        let ns = self.n_slack();
        let dim = m * t + ns;
        let mut g = DVector::zeros(dim);
        g.rows_mut(0, m * t).copy_from(&g_in);
        if let Some(w) = self.setup.slack_penalty {
            for j in 0..ns {
                g[m * t + j] = w;
            }
        }
        let nc = self.setup.constraints.len();
        let mut c = DMatrix::zeros(nc * t + ns, dim);
        let mut d = DVector::zeros(nc * t + ns);
        for k in 0..t {
            for (j, hs) in self.setup.constraints.iter().enumerate() {
                let row = k * nc + j;
                let h = DVector::from_column_slice(&hs.h);
                let gk = self.gamma.rows(k * n, n);
                c.view_mut((row, 0), (1, m * t)).copy_from(&(h.transpose() * gk));
                d[row] = hs.b - h.dot(&free.rows(k * n, n));
                if ns > 0 {
                    c[(row, m * t + j)] = -T::one();
                }
            }
        }
        for j in 0..ns {
            c[(nc * t + j, m * t + j)] = -T::one();
        }
        Ok(QpProblem { h: self.hessian.clone(), g, c, d })
    }

    /// Solve the MPC problem and roll out the optimal trajectory.
    pub fn solve(&mut self, z_hat: &DVector<T>, z_ref: &[DVector<T>], v_ref: &[DVector<T>]) -> Result<MpcSolution<T>> {
        let qp = self.build_qp(z_hat, z_ref, v_ref)?;
        let (m, t) = (self.setup.lti.m(), self.setup.horizon);
        let nc = self.setup.constraints.len();
        // shift last step's active rows one stage forward
        self.solver.warm_start = self
            .previous_active
            .iter()
            .filter_map(|&row| if row < nc * t && row >= nc { Some(row - nc) } else { None })
            .collect();
        let sol = self.solver.solve(&qp)?;
        self.previous_active = sol.active.clone();

        let inputs: Vec<DVector<T>> = (0..t).map(|k| sol.x.rows(k * m, m).into_owned()).collect();
        let mut states = Vec::with_capacity(t + 1);
        states.push(z_hat.clone());
        for k in 0..t {
            let next = self.setup.lti.step(&states[k], &inputs[k]);
            states.push(next);
        }
        let mut objective = T::zero();
        for k in 0..t {
            let e = &states[k + 1] - &z_ref[k + 1];
            let dv = &inputs[k] - &v_ref[k];
            objective += e.dot(&(&self.setup.q * &e)) + dv.dot(&(&self.setup.r * &dv));
        }
        let mut slack = T::zero();
        if let Some(w) = self.setup.slack_penalty {
            for j in 0..self.n_slack() {
                let s = sol.x[m * t + j];
                slack = slack.max(s);
                objective += w * (s + s * s);
            }
        }
        let active = sol.active.iter().copied().filter(|&r| r < nc * t).collect();
        Ok(MpcSolution {
            z_star: z_hat.clone(),
            v_star: inputs[0].clone(),
            z_next: states[1].clone(),
            states,
            inputs,
            status: sol.report.status,
            objective,
            slack,
            active,
            report: sol.report,
        })
    }

    /// Forget the warm-start active set.
    pub fn reset(&mut self) {
        self.previous_active.clear();
    }
}

/// Largest `h_j' z_k - b_j` over `k = 1..T`.
pub fn max_constraint_violation<T: Real>(constraints: &[HalfSpace<T>], states: &[DVector<T>]) -> T {
    let mut worst = -T::lit(f64::INFINITY);
    for z in states.iter().skip(1) {
        for c in constraints {
            let v = c.h.iter().zip(z.iter()).fold(T::zero(), |a, (h, x)| a + *h * *x) - c.b;
            worst = worst.max(v);
        }
    }
    worst
}
