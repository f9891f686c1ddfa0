//! Chained-integrator flat systems: exact discretization, dynamic extension
//! and finite-horizon Riccati synthesis.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Multi-input flat system given by one integrator chain per flat output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatSpec<T> {
    /// Chain order of every flat-output component.
    pub rho: Vec<usize>,
    /// Sampling time in seconds.
    pub dt: T,
}

impl<T: Real> FlatSpec<T> {
    pub fn new(rho: Vec<usize>, dt: T) -> Result<Self> {
        let spec = Self { rho, dt };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho.is_empty() {
            return Err(Error::InvalidArgument("flat spec needs at least one output".into()));
        }
        if self.rho.iter().any(|&r| r == 0) {
            return Err(Error::InvalidArgument("chain orders must be >= 1".into()));
        }
        if !(self.dt > T::zero()) {
            return Err(Error::InvalidArgument("sampling time must be positive".into()));
        }
        Ok(())
    }

    /// Number of flat outputs (and flat inputs).
    pub fn m(&self) -> usize {
        self.rho.len()
    }

    /// Flat-state dimension, the sum of all chain orders.
    pub fn n_z(&self) -> usize {
        self.rho.iter().sum()
    }

    /// Row offset of every chain block inside the flat state.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.rho
            .iter()
            .map(|&r| {
                let o = acc;
                acc += r;
                o
            })
            .collect()
    }

    /// Chain index owning flat-state row `row`.
    pub fn chain_of(&self, row: usize) -> usize {
        let mut acc = 0;
        for (i, &r) in self.rho.iter().enumerate() {
            acc += r;
            if row < acc {
                return i;
            }
        }
        panic!("row {row} outside flat state of dimension {acc}")
    }
}

fn factorial<T: Real>(n: usize) -> T {
    (1..=n).fold(T::one(), |acc, k| acc * T::lit(k as f64))
}

/// Exact zero-order-hold discretization of a `rho`-chain integrator.
///
/// Entries follow the nilpotent exponential: `A[r][c] = dt^(c-r)/(c-r)!` on and
/// above the diagonal and `B[r] = dt^(rho-r)/(rho-r)!`.
pub fn discretize_chain<T: Real>(rho: usize, dt: T) -> Result<(DMatrix<T>, DVector<T>)> {
    if rho == 0 {
        return Err(Error::InvalidArgument("chain order must be >= 1".into()));
    }
    if !(dt > T::zero()) {
        return Err(Error::InvalidArgument("sampling time must be positive".into()));
    }
    let a = DMatrix::from_fn(rho, rho, |r, c| {
        if c >= r {
            dt.powi((c - r) as i32) / factorial::<T>(c - r)
        } else {
            T::zero()
        }
    });
    let b = DVector::from_fn(rho, |r, _| {
        let p = rho - r;
        dt.powi(p as i32) / factorial::<T>(p)
    });
    Ok((a, b))
}

/// Discretized block-diagonal flat LTI system `z+ = A z + B v`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteFlatLti<T: Real> {
    pub spec: FlatSpec<T>,
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
}

impl<T: Real> DiscreteFlatLti<T> {
    pub fn n_z(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Column segment `B_{d,i}` of chain `i`.
    pub fn b_block(&self, i: usize) -> DVector<T> {
        let off = self.spec.offsets()[i];
        self.b.view((off, i), (self.spec.rho[i], 1)).column(0).into_owned()
    }

    pub fn step(&self, z: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        &self.a * z + &self.b * v
    }
}

/// Block-diagonal composition of [`discretize_chain`] over all chains.
pub fn assemble_flat_lti<T: Real>(spec: &FlatSpec<T>) -> Result<DiscreteFlatLti<T>> {
    spec.validate()?;
    let n = spec.n_z();
    let m = spec.m();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    for (i, (&rho, off)) in spec.rho.iter().zip(spec.offsets()).enumerate() {
        let (ai, bi) = discretize_chain(rho, spec.dt)?;
        a.view_mut((off, off), (rho, rho)).copy_from(&ai);
        b.view_mut((off, i), (rho, 1)).copy_from(&bi);
    }
    Ok(DiscreteFlatLti { spec: spec.clone(), a, b })
}

/// Gain and cost-to-go of the finite-horizon Riccati recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiResult<T: Real> {
    /// Step-0 feedback gain, `m x n_z`.
    pub k: DMatrix<T>,
    /// Step-0 cost-to-go, `n_z x n_z`.
    pub p: DMatrix<T>,
}

fn is_block_diagonal<T: Real>(q: &DMatrix<T>, spec: &FlatSpec<T>) -> bool {
    let n = q.nrows();
    (0..n).all(|r| (0..n).all(|c| spec.chain_of(r) == spec.chain_of(c) || q[(r, c)] == T::zero()))
}

fn is_diagonal<T: Real>(r: &DMatrix<T>) -> bool {
    let n = r.nrows();
    (0..n).all(|i| (0..n).all(|j| i == j || r[(i, j)] == T::zero()))
}

/// Spectral radius of a square matrix.
pub fn spectral_radius<T: Real>(m: &DMatrix<T>) -> T {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|l| (l.re * l.re + l.im * l.im).sqrt())
        .fold(T::zero(), |a, b| if b > a { b } else { a })
}

/// Backward Riccati recursion with terminal weight `Q` over `horizon` steps.
///
/// Returns the step-0 gain and cost-to-go, which make the unconstrained
/// horizon-`horizon` tracking problem equivalent to `v = -K e + v_ref`.
pub fn riccati_synthesis<T: Real>(
    lti: &DiscreteFlatLti<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
    horizon: usize,
) -> Result<RiccatiResult<T>> {
    let n = lti.n_z();
    let m = lti.m();
    if q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Dimension(format!(
            "Q {:?} / R {:?} for n_z={n}, m={m}",
            q.shape(),
            r.shape()
        )));
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be >= 1".into()));
    }
    if !is_block_diagonal(q, &lti.spec) {
        return Err(Error::InvalidArgument("Q must be block diagonal over the chains".into()));
    }
    if !is_diagonal(r) {
        return Err(Error::InvalidArgument("R must be diagonal".into()));
    }
    if q.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("Q".into()));
    }
    if r.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("R".into()));
    }

    let a = &lti.a;
    let b = &lti.b;
    let mut p = q.clone();
    let mut k = DMatrix::zeros(m, n);
    for _ in 0..horizon {
        let btp = b.transpose() * &p;
        let s = r + &btp * b;
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("R + B'PB".into()))?;
        k = chol.solve(&(&btp * a));
        let atp = a.transpose() * &p;
        let mut next = q + &atp * a - &atp * b * &k;
        // keep P exactly symmetric
        next = (&next + next.transpose()) * T::lit(0.5);
        p = next;
    }

    let acl = a - b * &k;
    let rad = spectral_radius(&acl);
    if !(rad < T::one()) {
        return Err(Error::NotStabilizing(rad.as_f64()));
    }
    Ok(RiccatiResult { k, p })
}

/// Quadratic Lyapunov function `e' P e`.
pub fn lyapunov_value<T: Real>(p: &DMatrix<T>, e: &DVector<T>) -> T {
    (e.transpose() * p * e)[(0, 0)]
}

/// Discrete dynamic extension `eta_k = A eta_{k-1} + B nu_k`, `u_k = C eta_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtensionSpec<T: Real> {
    /// Extension order per original input; 0 passes the extended input through.
    pub orders: Vec<usize>,
    pub dt: T,
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub c: DMatrix<T>,
}

impl<T: Real> ExtensionSpec<T> {
    pub fn new(orders: Vec<usize>, dt: T) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::InvalidArgument("extension needs at least one input".into()));
        }
        let sizes: Vec<usize> = orders.iter().map(|&d| d.max(1)).collect();
        let eta_dim: usize = sizes.iter().sum();
        let m = orders.len();
        let mut a = DMatrix::zeros(eta_dim, eta_dim);
        let mut b = DMatrix::zeros(eta_dim, m);
        let mut c = DMatrix::zeros(m, eta_dim);
        let mut off = 0;
        for (i, &d) in orders.iter().enumerate() {
            if d == 0 {
                b[(off, i)] = T::one();
            } else {
                let (ai, bi) = discretize_chain(d, dt)?;
                a.view_mut((off, off), (d, d)).copy_from(&ai);
                b.view_mut((off, i), (d, 1)).copy_from(&bi);
            }
            c[(i, off)] = T::one();
            off += sizes[i];
        }
        Ok(Self { orders, dt, a, b, c })
    }

    pub fn eta_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.orders.len()
    }

    /// Offset of input `i`'s block inside the extension state.
    pub fn offset(&self, i: usize) -> usize {
        self.orders[..i].iter().map(|&d| d.max(1)).sum()
    }

    /// Advance the extension one step and read off the system input.
    pub fn step(&self, eta_prev: &DVector<T>, nu: &DVector<T>) -> Result<(DVector<T>, DVector<T>)> {
        if eta_prev.len() != self.eta_dim() || nu.len() != self.m() {
            return Err(Error::Dimension(format!(
                "extension expects eta {} / nu {}, got {} / {}",
                self.eta_dim(),
                self.m(),
                eta_prev.len(),
                nu.len()
            )));
        }
        let eta = &self.a * eta_prev + &self.b * nu;
        let u = &self.c * &eta;
        Ok((eta, u))
    }

    /// Affine map `nu -> u`: returns `(C A eta_prev, C B)`.
    pub fn input_map(&self, eta_prev: &DVector<T>) -> (DVector<T>, DMatrix<T>) {
        (&self.c * (&self.a * eta_prev), &self.c * &self.b)
    }
}

/// Free-function form of [`ExtensionSpec::step`].
pub fn extension_step<T: Real>(
    ext: &ExtensionSpec<T>,
    eta_prev: &DVector<T>,
    nu: &DVector<T>,
) -> Result<(DVector<T>, DVector<T>)> {
    ext.step(eta_prev, nu)
}
