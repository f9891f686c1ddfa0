//! One-step SOCP safety filter on top of the learned flat input map.
//!
//! Decision vector `y = [nu; q1]`, extended by `[q2; t_1..t_m]` when the
//! Lyapunov decrease constraint is included.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{ConeBackend, ConeProgram, InteriorPoint, SocConstraint, SolveStatus, SolverReport, VarBound};
use crate::error::{Error, Result};
use crate::flat::{DiscreteFlatLti, ExtensionSpec, RiccatiResult};
use crate::fmpc::HalfSpace;
use crate::gp::{AffineGp, GammaTerms};
use crate::scalar::Real;

/// Terms of the Lyapunov decrease condition around the nominal feedback.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovData<T: Real> {
    pub w1: DVector<T>,
    /// Diagonal of `W2 = B' P B`.
    pub w2: DVector<T>,
    pub w3: T,
    pub w4: DVector<T>,
    pub epsilon: T,
    pub e: DVector<T>,
    pub v_nom: DVector<T>,
}

impl<T: Real> LyapunovData<T> {
    /// `w3 + w1' W2^-1 w1 / 4`.
    pub fn rhs(&self) -> T {
        let mut s = self.w3;
        for i in 0..self.w1.len() {
            s += self.w1[i] * self.w1[i] / (T::lit(4.0) * self.w2[i]);
        }
        s
    }
}

pub fn lyapunov_data<T: Real>(
    riccati: &RiccatiResult<T>,
    lti: &DiscreteFlatLti<T>,
    e: &DVector<T>,
    v_ref: &DVector<T>,
    epsilon: T,
) -> Result<LyapunovData<T>> {
    let (n, m) = (lti.n_z(), lti.m());
    if e.len() != n || v_ref.len() != m || riccati.p.shape() != (n, n) || riccati.k.shape() != (m, n) {
        return Err(Error::Dimension("lyapunov data inputs do not match the flat system".into()));
    }
    let p = &riccati.p;
    let b = &lti.b;
    let acl = &lti.a - b * &riccati.k;
    let w2_full = b.transpose() * p * b;
    let scale = w2_full.amax();
    for i in 0..m {
        for j in 0..m {
            if i != j && w2_full[(i, j)].abs() > T::lit(1e-10) * (T::one() + scale) {
                return Err(Error::InvalidArgument("B' P B is not diagonal".into()));
            }
        }
    }
    let w2 = w2_full.diagonal();
    if w2.iter().any(|&x| !(x > T::zero())) {
        return Err(Error::NotPositiveDefinite("B' P B".into()));
    }
    let w1 = (b.transpose() * p * &acl * e) * T::lit(2.0);
    let decrease = p - acl.transpose() * p * &acl;
    let w3 = e.dot(&(&decrease * e)) - epsilon;
    let w4 = DVector::from_fn(m, |i, _| w1[i] / (T::lit(2.0) * w2[i]));
    let v_nom = v_ref - &riccati.k * e;
    Ok(LyapunovData { w1, w2, w3, w4, epsilon, e: e.clone(), v_nom })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzBound<T: Real> {
    pub l: DVector<T>,
    pub rho_bar: T,
}

/// Corners of the box `[lo, hi]`.
pub fn box_vertices<T: Real>(lo: &DVector<T>, hi: &DVector<T>) -> Vec<DVector<T>> {
    let m = lo.len();
    (0..1usize << m)
        .map(|mask| DVector::from_fn(m, |i, _| if mask >> i & 1 == 1 { hi[i] } else { lo[i] }))
        .collect()
}

/// `2 W2_ii (|mu_i(s) - v_nom_i + w4_i| + rho_bar sigma_i(s))`.
pub fn lipschitz_integrand<T: Real>(g: &GammaTerms<T>, lyap: &LyapunovData<T>, i: usize, s: &DVector<T>, rho_bar: T) -> T {
    let sigma = g.variance(s).max(T::zero()).sqrt();
    T::lit(2.0) * lyap.w2[i] * ((g.mean(s) - lyap.v_nom[i] + lyap.w4[i]).abs() + rho_bar * sigma)
}

/// Maximum of the integrand over the input box, attained at a vertex since
/// it is convex in `s`.
pub fn lipschitz_bound<T: Real>(
    gammas: &[GammaTerms<T>],
    lyap: &LyapunovData<T>,
    nu_min: &DVector<T>,
    nu_max: &DVector<T>,
    rho_bar: T,
) -> Result<LipschitzBound<T>> {
    if nu_min.len() != nu_max.len() || nu_min.iter().zip(nu_max.iter()).any(|(a, b)| !(a <= b)) {
        return Err(Error::InvalidArgument("input box is empty or malformed".into()));
    }
    if nu_min.iter().chain(nu_max.iter()).any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("input box must be bounded".into()));
    }
    let verts = box_vertices(nu_min, nu_max);
    let l = DVector::from_fn(gammas.len(), |i, _| {
        verts
            .iter()
            .map(|s| lipschitz_integrand(&gammas[i], lyap, i, s, rho_bar))
            .fold(T::zero(), |a, b| a.max(b))
    });
    Ok(LipschitzBound { l, rho_bar })
}

/// Factor `sigma(nu) = ||G nu + g||` of the posterior standard deviation.
///
/// Eigenvalues of `[[g3, g4'/2], [g4/2, g5]]` below zero are clipped, which
/// only enlarges the variance. Returns the clipped mass as well.
pub fn std_factor<T: Real>(g: &GammaTerms<T>) -> (DMatrix<T>, DVector<T>, T) {
    let m = g.g2.len();
    let half = T::lit(0.5);
    let s = DMatrix::from_fn(m + 1, m + 1, |r, c| match (r, c) {
        (0, 0) => g.g3,
        (0, c) => half * g.g4[c - 1],
        (r, 0) => half * g.g4[r - 1],
        (r, c) => half * (g.g5[(r - 1, c - 1)] + g.g5[(c - 1, r - 1)]),
    });
    let eig = s.symmetric_eigen();
    let mut clipped = T::zero();
    let mut ft = DMatrix::zeros(m + 1, m + 1);
    for k in 0..=m {
        let lam = eig.eigenvalues[k];
        if lam < T::zero() {
            clipped += -lam;
            continue;
        }
        let root = lam.sqrt();
        for j in 0..=m {
            ft[(k, j)] = root * eig.eigenvectors[(j, k)];
        }
    }
    (ft.columns(1, m).into_owned(), ft.column(0).into_owned(), clipped)
}

/// Symmetric PSD factor `F` with `M = F F'` (negative eigenvalues dropped).
fn psd_factor<T: Real>(mat: &DMatrix<T>) -> DMatrix<T> {
    let sym = (mat + mat.transpose()) * T::lit(0.5);
    let eig = sym.symmetric_eigen();
    let n = mat.nrows();
    DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, c)] * eig.eigenvalues[c].max(T::zero()).sqrt())
}

/// Which constraint groups enter the program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterLevel {
    /// Lyapunov decrease, state and input constraints.
    Full,
    /// State and input constraints.
    NoLyapunov,
    /// Input constraints only.
    InputsOnly,
    /// No program solved; previous input held.
    Hold,
}

/// Everything the program is assembled from, all at the same time step.
#[derive(Debug, Clone)]
pub struct FilterProblem<'a, T: Real> {
    pub gammas: &'a [GammaTerms<T>],
    pub lyap: &'a LyapunovData<T>,
    pub lip: &'a LipschitzBound<T>,
    /// FMPC stage state and input.
    pub z_star: &'a DVector<T>,
    pub v_star: &'a DVector<T>,
    pub lti: &'a DiscreteFlatLti<T>,
    pub constraints: &'a [HalfSpace<T>],
    /// `rho(1 - delta_j)` per half-space.
    pub state_quantiles: &'a [T],
    pub ext: &'a ExtensionSpec<T>,
    pub eta_prev: &'a DVector<T>,
    pub inputs: &'a InputBounds<T>,
    pub nu_min: &'a DVector<T>,
    pub nu_max: &'a DVector<T>,
    pub betas: &'a [T],
}

/// Index map of the decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub m: usize,
    pub lyapunov: bool,
}

impl Layout {
    pub fn q1(&self) -> usize {
        self.m
    }

    pub fn q2(&self) -> usize {
        self.m + 1
    }

    pub fn t(&self, i: usize) -> usize {
        self.m + 2 + i
    }

    pub fn n_vars(&self) -> usize {
        if self.lyapunov {
            2 * self.m + 2
        } else {
            self.m + 1
        }
    }
}

fn unit<T: Real>(n: usize, i: usize) -> DVector<T> {
    let mut v = DVector::zeros(n);
    v[i] = T::one();
    v
}

/// `||[2 F' nu; 1 - q]|| <= 1 + q`, i.e. `q >= nu' F F' nu`.
fn quadratic_epigraph<T: Real>(f: &DMatrix<T>, q: usize, n: usize) -> SocConstraint<T> {
    let m = f.nrows();
    let k = f.ncols();
    let mut a = DMatrix::zeros(k + 1, n);
    a.view_mut((0, 0), (k, m)).copy_from(&(f.transpose() * T::lit(2.0)));
    a[(k, q)] = -T::one();
    let mut b = DVector::zeros(k + 1);
    b[k] = -T::one();
    SocConstraint { a, b, c: unit(n, q), d: T::one() }
}

impl<T: Real> FilterProblem<'_, T> {
    fn check(&self) -> Result<()> {
        let m = self.lti.m();
        if self.ext.m() != m {
            return Err(Error::Dimension("extended and flat inputs differ in count".into()));
        }
        if self.gammas.len() != m || self.betas.len() != m || self.lip.l.len() != m {
            return Err(Error::Dimension("GP outputs do not match the flat inputs".into()));
        }
        if self.gammas.iter().any(|g| g.g2.len() != self.ext.m()) {
            return Err(Error::Dimension("GP input dimension differs from the extension".into()));
        }
        if self.state_quantiles.len() != self.constraints.len() {
            return Err(Error::Dimension("one quantile per half-space is required".into()));
        }
        if self.nu_min.len() != self.ext.m() || self.nu_max.len() != self.ext.m() {
            return Err(Error::Dimension("extended input box".into()));
        }
        let b = self.inputs;
        let r = self.ext.c.nrows();
        if r != m || [&b.lo, &b.hi, &b.slope_lo, &b.slope_hi].iter().any(|v| v.len() != r) {
            return Err(Error::Dimension("system input bounds".into()));
        }
        Ok(())
    }

    /// Assemble the cone program at the given level (`Hold` is rejected).
    pub fn assemble(&self, level: FilterLevel) -> Result<(ConeProgram<T>, Layout)> {
        self.check()?;
        if level == FilterLevel::Hold {
            return Err(Error::InvalidArgument("nothing to assemble when holding".into()));
        }
        let m_out = self.lti.m();
        let m = self.ext.m();
        let layout = Layout { m, lyapunov: level == FilterLevel::Full };
        let n = layout.n_vars();
        let two = T::lit(2.0);

        // expected feedback-linearization mismatch
        let mut objective = DVector::zeros(n);
        let mut quad = DMatrix::zeros(m, m);
        for (i, g) in self.gammas.iter().enumerate() {
            let lin = &g.g2 * (two * (g.g1 - self.v_star[i])) + &g.g4;
            let mut head = objective.rows_mut(0, m);
            head += &lin;
            quad += &g.g2 * g.g2.transpose() + &g.g5;
        }
        let scale = self.objective_scale();
        objective /= scale;
        quad /= scale;
        objective[layout.q1()] = T::one();
        let mut socs = vec![quadratic_epigraph(&psd_factor(&quad), layout.q1(), n)];

        let factors: Vec<(DMatrix<T>, DVector<T>)> = self
            .gammas
            .iter()
            .map(|g| {
                let (gm, gv, _) = std_factor(g);
                (gm, gv)
            })
            .collect();

        let mut lin_rows: Vec<(DVector<T>, T)> = Vec::new();
        if layout.lyapunov {
            let lyap = self.lyap;
            let mut w2_quad = DMatrix::zeros(m, m);
            let mut c3 = DVector::zeros(n);
            let mut d3 = lyap.rhs();
            for (i, g) in self.gammas.iter().enumerate() {
                let a_i = g.g1 - lyap.v_nom[i] + lyap.w4[i];
                w2_quad += &g.g2 * g.g2.transpose() * lyap.w2[i];
                let mut head = c3.rows_mut(0, m);
                head += &g.g2 * (two * lyap.w2[i] * a_i);
                d3 -= lyap.w2[i] * a_i * a_i;
            }
            socs.push(quadratic_epigraph(&psd_factor(&w2_quad), layout.q2(), n));
            for i in 0..m_out {
                let (gm, gv) = &factors[i];
                let scale = self.lip.l[i] * self.betas[i];
                let k = gv.len();
                let mut a = DMatrix::zeros(k, n);
                a.view_mut((0, 0), (k, m)).copy_from(&(gm * scale));
                socs.push(SocConstraint { a, b: -(gv * scale), c: unit(n, layout.t(i)), d: T::zero() });
                c3[layout.t(i)] = T::one();
            }
            c3[layout.q2()] = T::one();
            lin_rows.push((c3, d3));
        }

        if level != FilterLevel::InputsOnly {
            let mean_free = &self.lti.a * self.z_star
                + &self.lti.b * DVector::from_iterator(m_out, self.gammas.iter().map(|g| g.g1));
            for (j, hs) in self.constraints.iter().enumerate() {
                let h = DVector::from_column_slice(&hs.h);
                let hb = self.lti.b.transpose() * &h;
                let k = factors[0].1.len();
                let mut a = DMatrix::zeros(m_out * k, n);
                let mut b = DVector::zeros(m_out * k);
                let mut c = DVector::zeros(n);
                for i in 0..m_out {
                    let w = self.state_quantiles[j] * hb[i].abs();
                    let (gm, gv) = &factors[i];
                    a.view_mut((i * k, 0), (k, m)).copy_from(&(gm * w));
                    b.rows_mut(i * k, k).copy_from(&(-(gv * w)));
                    let mut head = c.rows_mut(0, m);
                    head -= &self.gammas[i].g2 * hb[i];
                }
                socs.push(SocConstraint { a, b, c, d: hs.b - h.dot(&mean_free) });
            }
        }

        // u = C (A eta + B nu)
        let (u_free, u_map) = self.ext.input_map(self.eta_prev);
        for r in 0..u_map.nrows() {
            let mut row = DVector::zeros(n);
            row.rows_mut(0, m).copy_from(&u_map.row(r).transpose());
            let mut upper = row.clone();
            upper[r] += self.inputs.slope_hi[r];
            let mut lower = -row;
            lower[r] -= self.inputs.slope_lo[r];
            lin_rows.push((upper, self.inputs.hi[r] - u_free[r]));
            lin_rows.push((lower, u_free[r] - self.inputs.lo[r]));
        }

        let lin_g = DMatrix::from_fn(lin_rows.len(), n, |r, c| lin_rows[r].0[c]);
        let lin_h = DVector::from_iterator(lin_rows.len(), lin_rows.iter().map(|r| r.1));
        let bounds = (0..m).map(|i| VarBound { index: i, lower: self.nu_min[i], upper: self.nu_max[i] }).collect();
        let prog = ConeProgram { objective, socs, lin_g, lin_h, bounds };
        prog.validate()?;
        Ok((prog, layout))
    }

    /// Left and right side of the bounded Lyapunov condition at `nu`.
    pub fn lyapunov_sides(&self, nu: &DVector<T>) -> (T, T) {
        let mut lhs = T::zero();
        for (i, g) in self.gammas.iter().enumerate() {
            let d = g.mean(nu) - self.lyap.v_nom[i] + self.lyap.w4[i];
            lhs += self.lyap.w2[i] * d * d + self.lip.l[i] * self.betas[i] * g.variance(nu).max(T::zero()).sqrt();
        }
        (lhs, self.lyap.rhs())
    }

    /// Divisor applied to the mismatch objective so its largest coefficient is one.
    pub fn objective_scale(&self) -> T {
        let two = T::lit(2.0);
        let m = self.ext.m();
        let mut lin = DVector::zeros(m);
        let mut quad = DMatrix::zeros(m, m);
        for (i, g) in self.gammas.iter().enumerate() {
            lin += &g.g2 * (two * (g.g1 - self.v_star[i])) + &g.g4;
            quad += &g.g2 * g.g2.transpose() + &g.g5;
        }
        lin.amax().max(quad.amax()).max(T::lit(1e-300))
    }

    /// Feasible completion of the auxiliary variables for a given `nu`.
    pub fn complete(&self, nu: &DVector<T>, layout: Layout) -> DVector<T> {
        let mut y = DVector::zeros(layout.n_vars());
        y.rows_mut(0, layout.m).copy_from(nu);
        let mut q1 = T::zero();
        let mut q2 = T::zero();
        for (i, g) in self.gammas.iter().enumerate() {
            let d = g.g2.dot(nu);
            q1 += d * d + nu.dot(&(&g.g5 * nu));
            q2 += self.lyap.w2[i] * d * d;
        }
        y[layout.q1()] = q1 / self.objective_scale();
        if layout.lyapunov {
            y[layout.q2()] = q2;
            for (i, g) in self.gammas.iter().enumerate() {
                let (gm, gv, _) = std_factor(g);
                y[layout.t(i)] = self.lip.l[i] * self.betas[i] * (gm * nu + gv).norm();
            }
        }
        y
    }
}

/// Per-step filter settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig<T: Real> {
    pub epsilon: T,
    /// Quantile used in the Lipschitz bound.
    pub rho_bar: T,
    pub state_quantiles: Vec<T>,
    pub nu_min: DVector<T>,
    pub nu_max: DVector<T>,
    pub u_min: DVector<T>,
    pub u_max: DVector<T>,
    /// Shrink bounds of twice-extended inputs by the stopping distance `rate^2 / (2 acc_max)`.
    pub tighten_overshoot: bool,
    /// Drop constraint groups when the full program is infeasible.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult<T: Real> {
    /// `None` when nothing feasible was found.
    pub nu_star: Option<DVector<T>>,
    pub level: FilterLevel,
    pub status: SolveStatus,
    /// Expected squared mismatch up to a constant.
    pub objective: T,
    /// `-(constraint residual)` per cone and per linear row at the solution.
    pub cone_slacks: Vec<T>,
    pub linear_slacks: Vec<T>,
    pub mean_next: DVector<T>,
    pub var_next: DVector<T>,
    /// Per half-space `rho_j sqrt(sum_i (h_j' B_i)^2 sigma_i^2)` at the solution.
    pub margins: Vec<T>,
    /// System input `C (A eta + B nu)`.
    pub u: Option<DVector<T>>,
    pub lipschitz: DVector<T>,
    /// System-input rows actually enforced.
    pub inputs: InputBounds<T>,
    pub program: ConeProgram<T>,
    pub report: SolverReport,
    /// Reports of every attempted level.
    pub attempts: Vec<(FilterLevel, SolveStatus)>,
}

/// System-input rows `u_r + slope_hi_r nu_r <= hi_r` and `u_r + slope_lo_r nu_r >= lo_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBounds<T: Real> {
    pub lo: DVector<T>,
    pub hi: DVector<T>,
    pub slope_lo: DVector<T>,
    pub slope_hi: DVector<T>,
}

impl<T: Real> InputBounds<T> {
    /// Plain box `lo <= u <= hi`.
    pub fn plain(lo: &DVector<T>, hi: &DVector<T>) -> Self {
        Self { lo: lo.clone(), hi: hi.clone(), slope_lo: DVector::zeros(lo.len()), slope_hi: DVector::zeros(hi.len()) }
    }

    /// `hi_r - u_r - slope_hi_r nu_r`.
    pub fn upper_slack(&self, r: usize, u: &DVector<T>, nu: &DVector<T>) -> T {
        self.hi[r] - u[r] - self.slope_hi[r] * nu[r]
    }

    /// `u_r + slope_lo_r nu_r - lo_r`.
    pub fn lower_slack(&self, r: usize, u: &DVector<T>, nu: &DVector<T>) -> T {
        u[r] + self.slope_lo[r] * nu[r] - self.lo[r]
    }
}

/// Braking-distance rows for twice-extended inputs.
///
/// With `T+`, `T'+` the value and rate after the step, the upper row bounds
/// `T+ + max(T'+, 0)^2 / (2 acc_down)` by `u_max` (and the lower row
/// symmetrically), so that full braking from the next step onwards keeps the
/// continuous command inside the bounds. The convex rate term is replaced by
/// its chord over the `nu` box, which is exact at full braking. If even full
/// braking cannot meet a bound, the bound is relaxed to what full braking
/// reaches.
pub fn overshoot_tightening<T: Real>(
    ext: &ExtensionSpec<T>,
    eta_prev: &DVector<T>,
    nu_min: &DVector<T>,
    nu_max: &DVector<T>,
    u_min: &DVector<T>,
    u_max: &DVector<T>,
) -> InputBounds<T> {
    let mut out = InputBounds::plain(u_min, u_max);
    let (u_free, u_map) = ext.input_map(eta_prev);
    let two = T::lit(2.0);
    for i in 0..ext.m() {
        if ext.orders[i] < 2 || !(nu_min[i] < T::zero() && nu_max[i] > T::zero()) {
            continue;
        }
        let off = ext.offset(i);
        let rate0 = eta_prev[off + 1];
        let gain = ext.b[(off + 1, i)];
        let (lo_nu, hi_nu) = (nu_min[i], nu_max[i]);
        let width = hi_nu - lo_nu;
        let u_at = |nu: T| u_free[i] + u_map[(i, i)] * nu;

        let up = |nu: T| {
            let r = (rate0 + gain * nu).max(T::zero());
            r * r / (two * -lo_nu)
        };
        let slope = (up(hi_nu) - up(lo_nu)) / width;
        out.slope_hi[i] = slope;
        out.hi[i] = (u_max[i] - up(lo_nu) + slope * lo_nu).max(u_at(lo_nu) + slope * lo_nu);

        let down = |nu: T| {
            let r = (-(rate0 + gain * nu)).max(T::zero());
            r * r / (two * hi_nu)
        };
        let slope = (down(hi_nu) - down(lo_nu)) / width;
        out.slope_lo[i] = -slope;
        out.lo[i] = (u_min[i] + down(hi_nu) - slope * hi_nu).min(u_at(hi_nu) - slope * hi_nu);
    }
    out
}

/// Gamma terms, Lyapunov data, Lipschitz bound, assembly and solve, with the
/// relaxation chain on infeasibility.
#[allow(clippy::too_many_arguments)]
pub fn filter_step<T: Real>(
    z_star: &DVector<T>,
    v_star: &DVector<T>,
    z_ref: &DVector<T>,
    v_ref: &DVector<T>,
    gp: &AffineGp<T>,
    lti: &DiscreteFlatLti<T>,
    riccati: &RiccatiResult<T>,
    constraints: &[HalfSpace<T>],
    ext: &ExtensionSpec<T>,
    eta_prev: &DVector<T>,
    cfg: &FilterConfig<T>,
    backend: &mut dyn ConeBackend<T>,
) -> Result<FilterResult<T>> {
    filter_step_from(
        FilterLevel::Full,
        z_star,
        v_star,
        z_ref,
        v_ref,
        gp,
        lti,
        riccati,
        constraints,
        ext,
        eta_prev,
        cfg,
        backend,
    )
}

/// [`filter_step`] starting the relaxation chain at `first`.
#[allow(clippy::too_many_arguments)]
pub fn filter_step_from<T: Real>(
    first: FilterLevel,
    z_star: &DVector<T>,
    v_star: &DVector<T>,
    z_ref: &DVector<T>,
    v_ref: &DVector<T>,
    gp: &AffineGp<T>,
    lti: &DiscreteFlatLti<T>,
    riccati: &RiccatiResult<T>,
    constraints: &[HalfSpace<T>],
    ext: &ExtensionSpec<T>,
    eta_prev: &DVector<T>,
    cfg: &FilterConfig<T>,
    backend: &mut dyn ConeBackend<T>,
) -> Result<FilterResult<T>> {
    if first == FilterLevel::Hold {
        return Err(Error::InvalidArgument("the chain cannot start at hold".into()));
    }
    let gammas = gp.gamma_terms(z_star)?;
    let e = z_star - z_ref;
    let lyap = lyapunov_data(riccati, lti, &e, v_ref, cfg.epsilon)?;
    let lip = lipschitz_bound(&gammas, &lyap, &cfg.nu_min, &cfg.nu_max, cfg.rho_bar)?;
    let inputs = if cfg.tighten_overshoot {
        overshoot_tightening(ext, eta_prev, &cfg.nu_min, &cfg.nu_max, &cfg.u_min, &cfg.u_max)
    } else {
        InputBounds::plain(&cfg.u_min, &cfg.u_max)
    };
    let problem = FilterProblem {
        gammas: &gammas,
        lyap: &lyap,
        lip: &lip,
        z_star,
        v_star,
        lti,
        constraints,
        state_quantiles: &cfg.state_quantiles,
        ext,
        eta_prev,
        inputs: &inputs,
        nu_min: &cfg.nu_min,
        nu_max: &cfg.nu_max,
        betas: &gp.confidence,
    };
    let chain = [FilterLevel::Full, FilterLevel::NoLyapunov, FilterLevel::InputsOnly];
    let start = chain.iter().position(|&l| l == first).unwrap_or(0);
    let levels = if cfg.fallback { &chain[start..] } else { &chain[start..=start] };
    let mut attempts = Vec::new();
    let mut last = None;
    for &level in levels {
        let (prog, layout) = problem.assemble(level)?;
        let sol = backend.solve_cone(&prog)?;
        attempts.push((level, sol.report.status));
        let ok = sol.report.status.is_optimal();
        last = Some((prog, layout, sol, level));
        if ok {
            break;
        }
    }
    let (program, layout, sol, level) = last.ok_or_else(|| Error::InvalidArgument("no filter level".into()))?;
    let optimal = sol.report.status.is_optimal();
    let nu = sol.y.rows(0, layout.m).into_owned();
    let mean = DVector::from_iterator(gammas.len(), gammas.iter().map(|g| g.mean(&nu)));
    let var = DVector::from_iterator(gammas.len(), gammas.iter().map(|g| g.variance(&nu)));
    let mean_next = &lti.a * z_star + &lti.b * &mean;
    let var_next = DVector::from_fn(lti.n_z(), |r, _| (0..lti.m()).fold(T::zero(), |a, i| a + lti.b[(r, i)] * lti.b[(r, i)] * var[i].max(T::zero())));
    let margins = constraints
        .iter()
        .zip(&cfg.state_quantiles)
        .map(|(c, &rho)| {
            let h = DVector::from_column_slice(&c.h);
            let s2 = (0..lti.m()).fold(T::zero(), |a, i| {
                let hb = h.dot(&lti.b.column(i));
                a + hb * hb * var[i].max(T::zero())
            });
            rho * s2.sqrt()
        })
        .collect();
    let cone_slacks = program.socs.iter().map(|s| -s.residual(&sol.y)).collect();
    let gy = &program.lin_g * &sol.y;
    let linear_slacks = (0..gy.len()).map(|r| program.lin_h[r] - gy[r]).collect();
    let u = optimal.then(|| {
        let (free, map) = ext.input_map(eta_prev);
        free + map * &nu
    });
    Ok(FilterResult {
        nu_star: optimal.then_some(nu),
        level: if optimal { level } else { FilterLevel::Hold },
        status: sol.report.status,
        objective: sol.objective * problem.objective_scale(),
        cone_slacks,
        linear_slacks,
        mean_next,
        var_next,
        margins,
        u,
        lipschitz: lip.l,
        inputs,
        program,
        report: sol.report,
        attempts,
    })
}

/// Default backend used by the harness.
pub fn default_backend<T: Real>() -> InteriorPoint<T> {
    InteriorPoint::new()
}
