//! Marginal-likelihood hyperparameter fitting.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{cholesky_solve, factor_gram, AffineGp, AffineKernelParams, Dataset, OutputGp, SeKernel};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub restarts: usize,
    pub max_iterations: usize,
    /// Stop when the gradient of the per-point log likelihood is this small.
    pub grad_tol: f64,
    pub seed: u64,
    /// Standard deviation of the log-parameter perturbation between restarts.
    pub perturbation: f64,
    /// Fit hyperparameters on an evenly strided subset of this size.
    pub subset: Option<usize>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { restarts: 5, max_iterations: 200, grad_tol: 1e-5, seed: 0, perturbation: 1.0, subset: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFitReport {
    pub lml_init: f64,
    pub lml: f64,
    pub iterations: usize,
    pub converged: bool,
    pub best_restart: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub outputs: Vec<OutputFitReport>,
}

impl FitReport {
    pub fn converged(&self) -> bool {
        self.outputs.iter().all(|o| o.converged)
    }
}

/// Squared coordinate differences and input products, fixed during a fit.
struct Pairwise<T: Real> {
    sq: Vec<DMatrix<T>>,
    nunu: Vec<DMatrix<T>>,
}

impl<T: Real> Pairwise<T> {
    fn new(z: &DMatrix<T>, nu: &DMatrix<T>) -> Self {
        let n = z.ncols();
        let sq = (0..z.nrows())
            .map(|d| DMatrix::from_fn(n, n, |i, j| (z[(d, i)] - z[(d, j)]) * (z[(d, i)] - z[(d, j)])))
            .collect();
        let nunu = (0..nu.nrows()).map(|j| DMatrix::from_fn(n, n, |a, b| nu[(j, a)] * nu[(j, b)])).collect();
        Self { sq, nunu }
    }

    fn se(&self, k: &SeKernel<T>) -> DMatrix<T> {
        let n = self.sq[0].nrows();
        let mut r2 = DMatrix::zeros(n, n);
        for (d, l) in k.lengthscales.iter().enumerate() {
            r2 += &self.sq[d] / (*l * *l);
        }
        r2.map(|x| k.variance * (-T::lit(0.5) * x).exp())
    }
}

fn lml_with_cache<T: Real>(theta: &DVector<T>, cache: &Pairwise<T>, y: &DVector<T>, n_z: usize, m: usize) -> Result<(T, DVector<T>)> {
    let params = AffineKernelParams::from_log_vec(theta, n_z, m)?;
    let n = y.len();
    // kernel blocks weighted by their input products
    let mut blocks = Vec::with_capacity(1 + m);
    blocks.push(cache.se(&params.alpha));
    for (j, kb) in params.beta.iter().enumerate() {
        blocks.push(cache.se(kb).component_mul(&cache.nunu[j]));
    }
    let mut k = blocks[0].clone();
    for b in &blocks[1..] {
        k += b;
    }
    let noise_var = params.noise_std * params.noise_std;
    let (l, _) = factor_gram(&k, noise_var)?;
    let alpha = cholesky_solve(&l, y);
    let linv = l.solve_lower_triangular(&DMatrix::identity(n, n)).ok_or(Error::IllConditioned)?;
    let kinv = linv.transpose() * &linv;
    let w = &alpha * alpha.transpose() - &kinv;

    let logdet = (0..n).fold(T::zero(), |a, i| a + l[(i, i)].ln());
    let lml = -T::lit(0.5) * y.dot(&alpha) - logdet - T::lit(0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln());

    let kernels: Vec<&SeKernel<T>> = std::iter::once(&params.alpha).chain(&params.beta).collect();
    let mut grad = DVector::zeros(theta.len());
    let half = T::lit(0.5);
    for (b, block) in blocks.iter().enumerate() {
        let wm = w.component_mul(block);
        let o = b * (1 + n_z);
        grad[o] = half * wm.sum();
        for d in 0..n_z {
            let l2 = kernels[b].lengthscales[d] * kernels[b].lengthscales[d];
            grad[o + 1 + d] = half * wm.component_mul(&cache.sq[d]).sum() / l2;
        }
    }
    grad[theta.len() - 1] = half * noise_var * w.trace();
    Ok((lml, grad))
}

/// Log marginal likelihood and its gradient in log-parameter space.
pub fn log_marginal_likelihood<T: Real>(
    params: &AffineKernelParams<T>,
    z: &DMatrix<T>,
    nu: &DMatrix<T>,
    y: &DVector<T>,
) -> Result<(T, DVector<T>)> {
    params.validate()?;
    if z.ncols() != y.len() || nu.ncols() != y.len() {
        return Err(Error::Dimension("training inputs and targets differ in length".into()));
    }
    let cache = Pairwise::new(z, nu);
    lml_with_cache(&params.to_log_vec(), &cache, y, params.n_z(), params.m())
}

fn default_init<T: Real>(z: &DMatrix<T>, nu: &DMatrix<T>, y: &DVector<T>) -> AffineKernelParams<T> {
    let n = T::lit(y.len().max(1) as f64);
    let spread = |row: Vec<T>| {
        let mean = row.iter().fold(T::zero(), |a, &x| a + x) / n;
        let var = row.iter().fold(T::zero(), |a, &x| a + (x - mean) * (x - mean)) / n;
        (mean, var)
    };
    let (_, var_y) = spread(y.iter().copied().collect());
    let var_y = var_y.max(T::lit(1e-6));
    let lengthscales: Vec<T> = (0..z.nrows())
        .map(|d| {
            let (_, v) = spread(z.row(d).iter().copied().collect());
            let s = v.sqrt();
            if s > T::lit(1e-9) {
                s * T::lit(2.0)
            } else {
                T::one()
            }
        })
        .collect();
    let m = nu.nrows();
    let beta = (0..m)
        .map(|j| {
            let second = nu.row(j).iter().fold(T::zero(), |a, &x| a + x * x) / n;
            SeKernel::new(var_y / (T::lit(2.0 * m as f64) * second.max(T::lit(1e-9))), lengthscales.clone())
        })
        .collect();
    AffineKernelParams {
        alpha: SeKernel::new(var_y * T::lit(0.5), lengthscales),
        beta,
        noise_std: var_y.sqrt() * T::lit(0.01),
    }
}

struct Minimum<T: Real> {
    x: DVector<T>,
    f: T,
    iterations: usize,
    converged: bool,
}

/// Limited-memory BFGS with backtracking Armijo steps.
fn lbfgs<T: Real>(
    mut f: impl FnMut(&DVector<T>) -> Option<(T, DVector<T>)>,
    x0: DVector<T>,
    max_iterations: usize,
    grad_tol: T,
) -> Option<Minimum<T>> {
    const MEMORY: usize = 8;
    let (mut fx, mut g) = f(&x0)?;
    let mut x = x0;
    let mut hist: Vec<(DVector<T>, DVector<T>, T)> = Vec::new();
    let mut iterations = 0;
    let mut converged = g.norm() <= grad_tol;
    while !converged && iterations < max_iterations {
        iterations += 1;
        // two-loop recursion
        let mut q = g.clone();
        let mut coeffs = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = *rho * s.dot(&q);
            q.axpy(-a, y, T::one());
            coeffs.push(a);
        }
        let gamma = hist.last().map_or_else(
            || T::one() / g.norm().max(T::one()),
            |(s, y, _)| s.dot(y) / y.dot(y),
        );
        q *= gamma;
        for ((s, y, rho), a) in hist.iter().zip(coeffs.iter().rev()) {
            let b = *rho * y.dot(&q);
            q.axpy(*a - b, s, T::one());
        }
        let mut dir = -q;
        let mut slope = dir.dot(&g);
        if !(slope < T::zero()) {
            hist.clear();
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        let mut step = T::one();
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &x + &dir * step;
            if let Some((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft <= fx + T::lit(1e-4) * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= T::lit(0.5);
        }
        let Some((x_new, f_new, g_new)) = accepted else { break };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > T::lit(1e-12) * s.norm() * y.norm() {
            if hist.len() == MEMORY {
                hist.remove(0);
            }
            hist.push((s, y, T::one() / sy));
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        converged = g.norm() <= grad_tol;
    }
    Some(Minimum { x, f: fx, iterations, converged })
}

fn strided_subset<T: Real>(z: &DMatrix<T>, nu: &DMatrix<T>, y: &DVector<T>, size: usize) -> (DMatrix<T>, DMatrix<T>, DVector<T>) {
    let n = y.len();
    let idx: Vec<usize> = (0..size).map(|i| i * n / size).collect();
    (z.select_columns(&idx), nu.select_columns(&idx), y.select_rows(&idx))
}

/// Fit one output's hyperparameters and condition on all data.
pub fn fit_output<T: Real>(
    z: &DMatrix<T>,
    nu: &DMatrix<T>,
    y: &DVector<T>,
    init: Option<AffineKernelParams<T>>,
    options: &FitOptions,
) -> Result<(OutputGp<T>, OutputFitReport)> {
    let n = y.len();
    if n < 2 {
        return Err(Error::InvalidArgument("at least two data points are needed to fit".into()));
    }
    if z.ncols() != n || nu.ncols() != n {
        return Err(Error::Dimension("training inputs and targets differ in length".into()));
    }
    let (n_z, m) = (z.nrows(), nu.nrows());
    let (zs, nus, ys) = match options.subset {
        Some(s) if s >= 2 && s < n => strided_subset(z, nu, y, s),
        _ => (z.clone(), nu.clone(), y.clone()),
    };
    let init = init.unwrap_or_else(|| default_init(&zs, &nus, &ys));
    init.validate()?;
    let cache = Pairwise::new(&zs, &nus);
    let scale = T::one() / T::lit(ys.len() as f64);
    let bound = T::lit(30.0);
    let objective = |theta: &DVector<T>| -> Option<(T, DVector<T>)> {
        if theta.iter().any(|t| t.abs() > bound) {
            return None;
        }
        let (l, g) = lml_with_cache(theta, &cache, &ys, n_z, m).ok()?;
        Some((-l * scale, -g * scale))
    };
    let theta0 = init.to_log_vec();
    let (f0, _) = objective(&theta0).ok_or(Error::IllConditioned)?;
    let lml_init = (-f0 / scale).as_f64();

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut best: Option<(Minimum<T>, usize)> = None;
    let mut total_iterations = 0;
    for r in 0..options.restarts.max(1) {
        let start = if r == 0 {
            theta0.clone()
        } else {
            theta0.map(|t| {
                let e: f64 = StandardNormal.sample(&mut rng);
                t + T::lit(options.perturbation * e)
            })
        };
        let Some(res) = lbfgs(&objective, start, options.max_iterations, T::lit(options.grad_tol)) else {
            continue;
        };
        total_iterations += res.iterations;
        if best.as_ref().is_none_or(|(b, _)| res.f < b.f) {
            best = Some((res, r));
        }
    }
    let (best, best_restart) = best.ok_or_else(|| Error::NotConverged("every restart failed".into()))?;
    let params = AffineKernelParams::from_log_vec(&best.x, n_z, m)?;
    let gp = OutputGp::condition(params, z.clone(), nu.clone(), y.clone())?;
    let report = OutputFitReport {
        lml_init,
        lml: (-best.f / scale).as_f64(),
        iterations: total_iterations,
        converged: best.converged,
        best_restart,
    };
    Ok((gp, report))
}

/// Fit an independent GP per output dimension of `data`.
pub fn fit<T: Real>(data: &Dataset<T>, options: &FitOptions) -> Result<(AffineGp<T>, FitReport)> {
    let (z, nu) = data.inputs()?;
    let mut outputs = Vec::new();
    let mut reports = Vec::new();
    for i in 0..data.m_out() {
        let y = data.targets(i);
        let opts = FitOptions { seed: options.seed.wrapping_add(i as u64), ..options.clone() };
        let (gp, rep) = fit_output(&z, &nu, &y, None, &opts)?;
        outputs.push(gp);
        reports.push(rep);
    }
    Ok((AffineGp::new(outputs)?, FitReport { outputs: reports }))
}
