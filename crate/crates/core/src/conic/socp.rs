//! Primal-dual interior-point method for small dense SOCPs.
//!
//! Solves `min c'y  s.t.  ||A_i y - b_i|| <= c_i'y + d_i`, `G y <= h` and
//! variable bounds through the homogeneous self-dual embedding with
//! Nesterov-Todd scaling and Mehrotra predictor-corrector steps.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{elapsed_us, ConeBackend, SolveStatus, SolverReport};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// `||A y - b|| <= c'y + d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocConstraint<T: Real> {
    pub a: DMatrix<T>,
    pub b: DVector<T>,
    pub c: DVector<T>,
    pub d: T,
}

impl<T: Real> SocConstraint<T> {
    /// `||A y - b|| - (c'y + d)`; non-positive when satisfied.
    pub fn residual(&self, y: &DVector<T>) -> T {
        (&self.a * y - &self.b).norm() - (self.c.dot(y) + self.d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarBound<T> {
    pub index: usize,
    pub lower: T,
    pub upper: T,
}

/// Linear objective with second-order cone, linear and bound constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeProgram<T: Real> {
    pub objective: DVector<T>,
    pub socs: Vec<SocConstraint<T>>,
    /// Rows of `G y <= h`.
    pub lin_g: DMatrix<T>,
    pub lin_h: DVector<T>,
    pub bounds: Vec<VarBound<T>>,
}

impl<T: Real> ConeProgram<T> {
    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        for (i, soc) in self.socs.iter().enumerate() {
            if soc.a.ncols() != n || soc.a.nrows() != soc.b.len() || soc.c.len() != n {
                return Err(Error::Dimension(format!("cone {i} is inconsistent with {n} variables")));
            }
        }
        if self.lin_g.ncols() != n || self.lin_g.nrows() != self.lin_h.len() {
            return Err(Error::Dimension("linear rows are inconsistent".into()));
        }
        for b in &self.bounds {
            if b.index >= n || b.lower > b.upper {
                return Err(Error::InvalidArgument(format!("bad bound on variable {}", b.index)));
            }
        }
        Ok(())
    }

    /// Largest violation of any constraint at `y`.
    pub fn max_violation(&self, y: &DVector<T>) -> T {
        let mut worst = T::zero();
        for soc in &self.socs {
            worst = worst.max(soc.residual(y));
        }
        let gy = &self.lin_g * y;
        for j in 0..gy.len() {
            worst = worst.max(gy[j] - self.lin_h[j]);
        }
        for b in &self.bounds {
            worst = worst.max(b.lower - y[b.index]).max(y[b.index] - b.upper);
        }
        worst
    }

    /// Conic standard form `G y + s = h`, `s` in orthant x SOC_1 x ... .
    fn standard_form(&self) -> (DMatrix<T>, DVector<T>, Vec<Block>) {
        let n = self.n_vars();
        let n_lin = self.lin_h.len() + 2 * self.bounds.len();
        let n_soc: usize = self.socs.iter().map(|s| s.b.len() + 1).sum();
        let rows = n_lin + n_soc;
        let mut g = DMatrix::zeros(rows, n);
        let mut h = DVector::zeros(rows);
        let mut r = 0;
        for j in 0..self.lin_h.len() {
            g.row_mut(r).copy_from(&self.lin_g.row(j));
            h[r] = self.lin_h[j];
            r += 1;
        }
        for b in &self.bounds {
            g[(r, b.index)] = T::one();
            h[r] = b.upper;
            g[(r + 1, b.index)] = -T::one();
            h[r + 1] = -b.lower;
            r += 2;
        }
        let mut blocks = Vec::new();
        if n_lin > 0 {
            blocks.push(Block { offset: 0, dim: n_lin, soc: false });
        }
        for soc in &self.socs {
            let k = soc.b.len();
            blocks.push(Block { offset: r, dim: k + 1, soc: true });
            for col in 0..n {
                g[(r, col)] = -soc.c[col];
            }
            h[r] = soc.d;
            for i in 0..k {
                for col in 0..n {
                    g[(r + 1 + i, col)] = -soc.a[(i, col)];
                }
                h[r + 1 + i] = -soc.b[i];
            }
            r += k + 1;
        }
        (g, h, blocks)
    }
}

/// Serialized cone program; matrices are stored row-major as nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeProgramDump {
    pub objective: Vec<f64>,
    pub socs: Vec<SocDump>,
    pub lin_g: Vec<Vec<f64>>,
    pub lin_h: Vec<f64>,
    pub bounds: Vec<VarBound<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocDump {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
}

fn rows_of<T: Real>(m: &DMatrix<T>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)].as_f64()).collect()).collect()
}

fn matrix_from<T: Real>(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<T>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("ragged matrix, expected {ncols} columns")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| T::lit(rows[i][j])))
}

fn vec_of<T: Real>(v: &DVector<T>) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

impl<T: Real> ConeProgram<T> {
    pub fn to_dump(&self) -> ConeProgramDump {
        ConeProgramDump {
            objective: vec_of(&self.objective),
            socs: self
                .socs
                .iter()
                .map(|s| SocDump { a: rows_of(&s.a), b: vec_of(&s.b), c: vec_of(&s.c), d: s.d.as_f64() })
                .collect(),
            lin_g: rows_of(&self.lin_g),
            lin_h: vec_of(&self.lin_h),
            bounds: self
                .bounds
                .iter()
                .map(|b| VarBound { index: b.index, lower: b.lower.as_f64(), upper: b.upper.as_f64() })
                .collect(),
        }
    }

    pub fn from_dump(dump: &ConeProgramDump) -> Result<Self> {
        let n = dump.objective.len();
        let lift = |v: &[f64]| DVector::from_iterator(v.len(), v.iter().map(|&x| T::lit(x)));
        let mut socs = Vec::with_capacity(dump.socs.len());
        for s in &dump.socs {
            socs.push(SocConstraint { a: matrix_from(&s.a, n)?, b: lift(&s.b), c: lift(&s.c), d: T::lit(s.d) });
        }
        let program = Self {
            objective: lift(&dump.objective),
            socs,
            lin_g: matrix_from(&dump.lin_g, n)?,
            lin_h: lift(&dump.lin_h),
            bounds: dump
                .bounds
                .iter()
                .map(|b| VarBound { index: b.index, lower: T::lit(b.lower), upper: T::lit(b.upper) })
                .collect(),
        };
        program.validate()?;
        Ok(program)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_dump())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_dump(&serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeSolution<T: Real> {
    pub y: DVector<T>,
    /// Dual variables of the standard-form constraints (linear rows, bounds, cones).
    pub z: DVector<T>,
    pub objective: T,
    pub report: SolverReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    offset: usize,
    dim: usize,
    soc: bool,
}

impl Block {
    fn degree(&self) -> usize {
        if self.soc {
            1
        } else {
            self.dim
        }
    }
}

/// Interior-point SOCP solver settings.
#[derive(Debug, Clone)]
pub struct InteriorPoint<T: Real> {
    pub max_iterations: usize,
    pub feas_tol: T,
    pub abs_tol: T,
    pub rel_tol: T,
    /// Certificate on the unscaled program required for `Optimal`; also
    /// accepted at the iteration cap.
    pub fallback_gap: T,
    pub fallback_residual: T,
}

impl<T: Real> Default for InteriorPoint<T> {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            feas_tol: T::lit(1e-9),
            abs_tol: T::lit(1e-8),
            rel_tol: T::lit(1e-8),
            fallback_gap: T::lit(1e-7),
            fallback_residual: T::lit(1e-8),
        }
    }
}

fn jordan<T: Real>(u: &[T], v: &[T], soc: bool, out: &mut [T]) {
    if soc {
        let dot = u.iter().zip(v).fold(T::zero(), |a, (x, y)| a + *x * *y);
        out[0] = dot;
        for i in 1..u.len() {
            out[i] = u[0] * v[i] + v[0] * u[i];
        }
    } else {
        for i in 0..u.len() {
            out[i] = u[i] * v[i];
        }
    }
}

/// Solve `lambda o x = r` for `x`.
fn jordan_div<T: Real>(lambda: &[T], r: &[T], soc: bool, out: &mut [T]) {
    if soc {
        let l0 = lambda[0];
        let l1r1 = (1..lambda.len()).fold(T::zero(), |a, i| a + lambda[i] * r[i]);
        let l1sq = (1..lambda.len()).fold(T::zero(), |a, i| a + lambda[i] * lambda[i]);
        let x0 = (l0 * r[0] - l1r1) / (l0 * l0 - l1sq);
        out[0] = x0;
        for i in 1..lambda.len() {
            out[i] = (r[i] - lambda[i] * x0) / l0;
        }
    } else {
        for i in 0..lambda.len() {
            out[i] = r[i] / lambda[i];
        }
    }
}

/// Largest `alpha` with `u + alpha d` in the cone (infinite when unbounded).
fn max_step<T: Real>(u: &[T], d: &[T], soc: bool) -> T {
    let inf = T::lit(f64::INFINITY);
    if !soc {
        return u.iter().zip(d).fold(inf, |a, (&ui, &di)| if di < T::zero() { a.min(-ui / di) } else { a });
    }
    let dd1 = (1..d.len()).fold(T::zero(), |a, i| a + d[i] * d[i]);
    let uu1 = (1..u.len()).fold(T::zero(), |a, i| a + u[i] * u[i]);
    let ud1 = (1..u.len()).fold(T::zero(), |a, i| a + u[i] * d[i]);
    let qa = d[0] * d[0] - dd1;
    let qb = T::lit(2.0) * (u[0] * d[0] - ud1);
    let qc = (u[0] * u[0] - uu1).max(T::zero());
    if d[0] >= dd1.sqrt() {
        return inf;
    }
    let two = T::lit(2.0);
    if qa.abs() <= T::lit(1e-300) {
        // linear: qb * alpha + qc >= 0
        return if qb < T::zero() { -qc / qb } else { inf };
    }
    let disc = (qb * qb - T::lit(4.0) * qa * qc).max(T::zero()).sqrt();
    // smallest positive root of qa a^2 + qb a + qc
    let r1 = if qb >= T::zero() { (-qb - disc) / (two * qa) } else { two * qc / (-qb + disc) };
    let r2 = if r1 != T::zero() { qc / (qa * r1) } else { inf };
    let mut best = inf;
    for r in [r1, r2] {
        if r > T::zero() && r < best {
            best = r;
        }
    }
    if d[0] < T::zero() {
        best = best.min(-u[0] / d[0]);
    }
    best
}

/// Nesterov-Todd scaling of one block: returns `(W, W^-1)` with `W z = W^-1 s`.
fn nt_scaling<T: Real>(s: &[T], z: &[T], soc: bool) -> (DMatrix<T>, DMatrix<T>) {
    let k = s.len();
    if !soc {
        let w = DVector::from_fn(k, |i, _| (s[i] / z[i]).sqrt());
        let winv = w.map(|x| T::one() / x);
        return (DMatrix::from_diagonal(&w), DMatrix::from_diagonal(&winv));
    }
    let jnorm = |v: &[T]| {
        let tail = (1..k).fold(T::zero(), |a, i| a + v[i] * v[i]).sqrt();
        ((v[0] - tail) * (v[0] + tail)).max(T::lit(1e-300)).sqrt()
    };
    let sn = jnorm(s);
    let zn = jnorm(z);
    let sb: Vec<T> = s.iter().map(|&x| x / sn).collect();
    let zb: Vec<T> = z.iter().map(|&x| x / zn).collect();
    let dot = sb.iter().zip(&zb).fold(T::zero(), |a, (x, y)| a + *x * *y);
    let gamma = ((T::one() + dot) / T::lit(2.0)).sqrt();
    let mut w = DVector::zeros(k);
    w[0] = (sb[0] + zb[0]) / (T::lit(2.0) * gamma);
    for i in 1..k {
        w[i] = (sb[i] - zb[i]) / (T::lit(2.0) * gamma);
    }
    let eta = (sn / zn).sqrt();
    let mut wmat = DMatrix::zeros(k, k);
    let mut winv = DMatrix::zeros(k, k);
    let w0 = w[0];
    wmat[(0, 0)] = w0;
    winv[(0, 0)] = w0;
    for i in 1..k {
        wmat[(0, i)] = w[i];
        wmat[(i, 0)] = w[i];
        winv[(0, i)] = -w[i];
        winv[(i, 0)] = -w[i];
        for l in 1..k {
            let v = w[i] * w[l] / (T::one() + w0) + if i == l { T::one() } else { T::zero() };
            wmat[(i, l)] = v;
            winv[(i, l)] = v;
        }
    }
    let wmat = wmat * eta;
    let winv = winv / eta;
    (wmat, winv)
}

struct Scaling<T: Real> {
    w: DMatrix<T>,
    winv: DMatrix<T>,
    lambda: DVector<T>,
}

impl<T: Real> InteriorPoint<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn solve(&self, program: &ConeProgram<T>) -> Result<ConeSolution<T>> {
        let start = Instant::now();
        program.validate()?;
        let n = program.n_vars();
        let (g0, h0, blocks) = program.standard_form();
        let rows = h0.len();
        if rows == 0 {
            return Err(Error::InvalidArgument("cone program without constraints".into()));
        }

        // per-block row scaling and objective scaling
        let mut g = g0.clone();
        let mut h = h0.clone();
        let mut row_scale = DVector::from_element(rows, T::one());
        for blk in &blocks {
            let ranges: Vec<usize> = if blk.soc { vec![blk.offset] } else { (blk.offset..blk.offset + blk.dim).collect() };
            for &r0 in &ranges {
                let len = if blk.soc { blk.dim } else { 1 };
                let mut mx = T::zero();
                for r in r0..r0 + len {
                    mx = mx.max(h[r].abs());
                    for c in 0..n {
                        mx = mx.max(g[(r, c)].abs());
                    }
                }
                if mx > T::zero() {
                    for r in r0..r0 + len {
                        row_scale[r] = mx;
                        h[r] /= mx;
                        for c in 0..n {
                            g[(r, c)] /= mx;
                        }
                    }
                }
            }
        }
        let c_scale = program.objective.amax().max(T::one());
        let c = &program.objective / c_scale;

        let degree: usize = blocks.iter().map(Block::degree).sum();
        let identity = {
            let mut e = DVector::zeros(rows);
            for blk in &blocks {
                if blk.soc {
                    e[blk.offset] = T::one();
                } else {
                    for r in blk.offset..blk.offset + blk.dim {
                        e[r] = T::one();
                    }
                }
            }
            e
        };

        // initial point
        let gtg = g.transpose() * &g + DMatrix::identity(n, n) * T::lit(1e-12);
        let gtg_lu = gtg.lu();
        let x_ls = gtg_lu.solve(&(g.transpose() * &h)).unwrap_or_else(|| DVector::zeros(n));
        let shift = |v: DVector<T>| -> DVector<T> {
            let mut alpha = -T::lit(f64::INFINITY);
            for blk in &blocks {
                let seg = &v.as_slice()[blk.offset..blk.offset + blk.dim];
                let a = if blk.soc {
                    let tail = seg[1..].iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
                    tail - seg[0]
                } else {
                    seg.iter().fold(-T::lit(f64::INFINITY), |a, &x| a.max(-x))
                };
                alpha = alpha.max(a);
            }
            if alpha < T::zero() {
                v
            } else {
                v + &identity * (T::one() + alpha)
            }
        };
        let mut x = x_ls.clone();
        let mut s = shift(&h - &g * &x_ls);
        let z_ls = &g * gtg_lu.solve(&(-&c)).unwrap_or_else(|| DVector::zeros(n));
        let mut z = shift(z_ls);
        let mut tau = T::one();
        let mut kappa = T::one();

        let mut status = SolveStatus::MaxIterations;
        let mut iterations = 0;
        let h_norm = h.norm().max(T::one());
        let c_norm = c.norm().max(T::one());

        for it in 0..=self.max_iterations {
            iterations = it;
            let rx = g.transpose() * &z + &c * tau;
            let rz = &g * &x + &s - &h * tau;
            let cx = c.dot(&x);
            let hz = h.dot(&z);
            let rt = kappa + cx + hz;
            let sz = s.dot(&z);
            let mu = (sz + tau * kappa) / T::lit((degree + 1) as f64);

            let pres = rz.norm() / tau / h_norm;
            let dres = rx.norm() / tau / c_norm;
            let pcost = cx / tau;
            let dcost = -hz / tau;
            let gap = sz / (tau * tau);
            let relgap = if pcost < T::zero() {
                Some(gap / -pcost)
            } else if dcost > T::zero() {
                Some(gap / dcost)
            } else {
                None
            };
            if pres <= self.feas_tol
                && dres <= self.feas_tol
                && (gap <= self.abs_tol || relgap.is_some_and(|r| r <= self.rel_tol))
                && gap * c_scale <= self.fallback_gap
                && program.max_violation(&(&x / tau)) <= self.fallback_residual
            {
                status = SolveStatus::Optimal;
                break;
            }
            if hz < T::zero() {
                let pinf = (g.transpose() * &z).norm() / (-hz) / c_norm;
                if pinf <= self.feas_tol {
                    status = SolveStatus::Infeasible;
                    break;
                }
            }
            if cx < T::zero() {
                let dinf = (&g * &x + &s).norm() / (-cx) / h_norm;
                if dinf <= self.feas_tol {
                    status = SolveStatus::Unbounded;
                    break;
                }
            }
            if it == self.max_iterations {
                break;
            }

            let sc = self.scale(&s, &z, &blocks, rows);
            // scaled KKT in (dx, W dz)
            let gs = &sc.winv * &g;
            let mut kkt = DMatrix::zeros(n + rows, n + rows);
            kkt.view_mut((0, n), (n, rows)).copy_from(&gs.transpose());
            kkt.view_mut((n, 0), (rows, n)).copy_from(&gs);
            kkt.view_mut((n, n), (rows, rows)).fill_with_identity();
            kkt.view_mut((n, n), (rows, rows)).neg_mut();
            let lu = kkt.clone().lu();
            // solves [0 G'; G -W^2] [x; z] = [a; b]
            let solve = |a: &DVector<T>, b: &DVector<T>| -> (DVector<T>, DVector<T>) {
                let mut rhs = DVector::zeros(n + rows);
                rhs.rows_mut(0, n).copy_from(a);
                rhs.rows_mut(n, rows).copy_from(&(&sc.winv * b));
                let mut sol = lu.solve(&rhs).unwrap_or_else(|| DVector::zeros(n + rows));
                let res = &rhs - &kkt * &sol;
                if let Some(fix) = lu.solve(&res) {
                    sol += fix;
                }
                (sol.rows(0, n).into_owned(), &sc.winv * sol.rows(n, rows))
            };
            let (x1, z1) = solve(&(-&c), &h);
            let denom_base = c.dot(&x1) + h.dot(&z1) - kappa / tau;

            // returns (dx, ds, dz, dtau, dkappa)
            let direction = |eta: T, target: &DVector<T>, rk: T| {
                // target = lambda o (W^-1 ds + W dz)
                let q = self.jdiv(&sc.lambda, target, &blocks, rows);
                let wq = &sc.w * &q;
                let (x0, z0) = solve(&(-&rx * eta), &(-&rz * eta - &wq));
                let dtau = (-(rt * eta) - rk / tau - c.dot(&x0) - h.dot(&z0)) / denom_base;
                let dx = &x0 + &x1 * dtau;
                let dz = &z0 + &z1 * dtau;
                let ds = -&rz * eta - &g * &dx + &h * dtau;
                let dkappa = (rk - kappa * dtau) / tau;
                (dx, ds, dz, dtau, dkappa)
            };

            // predictor
            let ll = self.jprod(&sc.lambda, &sc.lambda, &blocks, rows);
            let (_, ds_a, dz_a, dtau_a, dkappa_a) = direction(T::one(), &(-&ll), -tau * kappa);
            let alpha_a = self.step_length(&s, &ds_a, &z, &dz_a, tau, dtau_a, kappa, dkappa_a, &blocks).min(T::one());
            let sigma = (T::one() - alpha_a).powi(3);

            // corrector
            let ds_t = &sc.winv * &ds_a;
            let dz_t = &sc.w * &dz_a;
            let corr = self.jprod(&ds_t, &dz_t, &blocks, rows);
            let target = -&ll - corr + &identity * (sigma * mu);
            let rk = -tau * kappa - dtau_a * dkappa_a + sigma * mu;
            let (dx, ds, dz, dtau, dkappa) = direction(T::one() - sigma, &target, rk);
            let alpha = (self.step_length(&s, &ds, &z, &dz, tau, dtau, kappa, dkappa, &blocks) * T::lit(0.99)).min(T::one());

            let finite = |v: &DVector<T>| v.iter().all(|e| e.is_finite());
            if !(alpha > T::zero()) || !finite(&dx) || !finite(&ds) || !finite(&dz) || !(tau + alpha * dtau).is_finite() {
                break;
            }
            x.axpy(alpha, &dx, T::one());
            s.axpy(alpha, &ds, T::one());
            z.axpy(alpha, &dz, T::one());
            tau += alpha * dtau;
            kappa += alpha * dkappa;
        }

        // unscale
        let y = if status == SolveStatus::Infeasible { x.clone() } else { &x / tau };
        let mut z_out = &z / tau * c_scale;
        for r in 0..rows {
            z_out[r] /= row_scale[r];
        }
        let primal_residual = program.max_violation(&y).max(T::zero());
        let s_orig = &h0 - &g0 * &y;
        let gap = s_orig.dot(&z_out).abs();
        let stationarity = &program.objective + g0.transpose() * &z_out;
        let dual_residual = stationarity.amax();
        if status == SolveStatus::MaxIterations
            && gap <= self.fallback_gap
            && primal_residual <= self.fallback_residual
            && dual_residual <= self.fallback_gap
        {
            status = SolveStatus::Optimal;
        }
        let objective = program.objective.dot(&y);
        Ok(ConeSolution {
            y,
            z: z_out,
            objective,
            report: SolverReport {
                status,
                iterations,
                primal_residual: primal_residual.as_f64(),
                dual_residual: dual_residual.as_f64(),
                gap: gap.as_f64(),
                wall_time_us: elapsed_us(start),
            },
        })
    }

    fn scale(&self, s: &DVector<T>, z: &DVector<T>, blocks: &[Block], rows: usize) -> Scaling<T> {
        let mut w = DMatrix::zeros(rows, rows);
        let mut winv = DMatrix::zeros(rows, rows);
        for blk in blocks {
            let (o, k) = (blk.offset, blk.dim);
            let (wb, wib) = nt_scaling(&s.as_slice()[o..o + k], &z.as_slice()[o..o + k], blk.soc);
            w.view_mut((o, o), (k, k)).copy_from(&wb);
            winv.view_mut((o, o), (k, k)).copy_from(&wib);
        }
        let lambda = &w * z;
        Scaling { w, winv, lambda }
    }

    fn jprod(&self, u: &DVector<T>, v: &DVector<T>, blocks: &[Block], rows: usize) -> DVector<T> {
        let mut out = DVector::zeros(rows);
        for blk in blocks {
            let r = blk.offset..blk.offset + blk.dim;
            jordan(&u.as_slice()[r.clone()], &v.as_slice()[r.clone()], blk.soc, &mut out.as_mut_slice()[r]);
        }
        out
    }

    fn jdiv(&self, lambda: &DVector<T>, r: &DVector<T>, blocks: &[Block], rows: usize) -> DVector<T> {
        let mut out = DVector::zeros(rows);
        for blk in blocks {
            let rg = blk.offset..blk.offset + blk.dim;
            jordan_div(&lambda.as_slice()[rg.clone()], &r.as_slice()[rg.clone()], blk.soc, &mut out.as_mut_slice()[rg]);
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn step_length(
        &self,
        s: &DVector<T>,
        ds: &DVector<T>,
        z: &DVector<T>,
        dz: &DVector<T>,
        tau: T,
        dtau: T,
        kappa: T,
        dkappa: T,
        blocks: &[Block],
    ) -> T {
        let mut alpha = T::lit(f64::INFINITY);
        for blk in blocks {
            let r = blk.offset..blk.offset + blk.dim;
            alpha = alpha.min(max_step(&s.as_slice()[r.clone()], &ds.as_slice()[r.clone()], blk.soc));
            alpha = alpha.min(max_step(&z.as_slice()[r.clone()], &dz.as_slice()[r], blk.soc));
        }
        if dtau < T::zero() {
            alpha = alpha.min(-tau / dtau);
        }
        if dkappa < T::zero() {
            alpha = alpha.min(-kappa / dkappa);
        }
        alpha
    }
}

impl<T: Real> ConeBackend<T> for InteriorPoint<T> {
    fn solve_cone(&mut self, program: &ConeProgram<T>) -> Result<ConeSolution<T>> {
        self.solve(program)
    }
}

/// One-shot solve with default settings.
pub fn solve_cone<T: Real>(program: &ConeProgram<T>) -> Result<ConeSolution<T>> {
    InteriorPoint::default().solve(program)
}
