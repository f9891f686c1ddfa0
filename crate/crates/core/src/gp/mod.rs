//! Gaussian-process regression of the flat input map with an affine kernel.
//!
//! Each output `v_i = alpha_i(z) + beta_i(z)' nu` gets an independent GP with
//! kernel `k_a(z, z') + nu' diag(k_b1(z, z'), .., k_bm(z, z')) nu'`. At a query
//! state the posterior mean is affine and the variance quadratic in `nu`;
//! [`GammaTerms`] holds those coefficients.

mod artifact;
mod data;
mod fit;

pub use artifact::{GpArtifact, OutputArtifact, ARTIFACT_FORMAT, ARTIFACT_VERSION};
pub use data::{sample_training_data, Dataset, GpDataPoint, SamplingConfig};
pub use fit::{fit, fit_output, log_marginal_likelihood, FitOptions, FitReport, OutputFitReport};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Squared-exponential kernel with ARD lengthscales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeKernel<T> {
    pub variance: T,
    pub lengthscales: Vec<T>,
}

impl<T: Real> SeKernel<T> {
    pub fn new(variance: T, lengthscales: Vec<T>) -> Self {
        Self { variance, lengthscales }
    }

    pub fn eval(&self, a: &[T], b: &[T]) -> T {
        let mut r2 = T::zero();
        for ((x, y), l) in a.iter().zip(b).zip(&self.lengthscales) {
            let d = (*x - *y) / *l;
            r2 += d * d;
        }
        self.variance * (-T::lit(0.5) * r2).exp()
    }

    fn validate(&self, n_z: usize, what: &str) -> Result<()> {
        if self.lengthscales.len() != n_z {
            return Err(Error::Dimension(format!("{what}: {} lengthscales for {n_z} inputs", self.lengthscales.len())));
        }
        let ok = |x: T| x > T::zero() && x.is_finite();
        if !ok(self.variance) || !self.lengthscales.iter().all(|&l| ok(l)) {
            return Err(Error::InvalidArgument(format!("{what}: variances and lengthscales must be positive")));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> SeKernel<U> {
        SeKernel {
            variance: U::lit(self.variance.as_f64()),
            lengthscales: self.lengthscales.iter().map(|l| U::lit(l.as_f64())).collect(),
        }
    }
}

/// Hyperparameters of one output's affine kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineKernelParams<T> {
    pub alpha: SeKernel<T>,
    pub beta: Vec<SeKernel<T>>,
    pub noise_std: T,
}

impl<T: Real> AffineKernelParams<T> {
    /// Unit variances and lengthscales.
    pub fn isotropic(n_z: usize, m: usize, noise_std: T) -> Self {
        let k = SeKernel::new(T::one(), vec![T::one(); n_z]);
        Self { alpha: k.clone(), beta: vec![k; m], noise_std }
    }

    pub fn n_z(&self) -> usize {
        self.alpha.lengthscales.len()
    }

    pub fn m(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n_z = self.n_z();
        self.alpha.validate(n_z, "alpha kernel")?;
        for (j, k) in self.beta.iter().enumerate() {
            k.validate(n_z, &format!("beta kernel {j}"))?;
        }
        if !(self.noise_std > T::zero() && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument("noise standard deviation must be positive".into()));
        }
        Ok(())
    }

    /// `k_a(z_i, z_j) + nu_i' diag(k_b(z_i, z_j)) nu_j`.
    pub fn kernel_eval(&self, z_i: &[T], nu_i: &[T], z_j: &[T], nu_j: &[T]) -> T {
        let mut k = self.alpha.eval(z_i, z_j);
        for (l, kb) in self.beta.iter().enumerate() {
            k += nu_i[l] * nu_j[l] * kb.eval(z_i, z_j);
        }
        k
    }

    /// `[ln s_a^2, ln l_a.., (ln s_bj^2, ln l_bj..).., ln sigma_n^2]`.
    pub fn to_log_vec(&self) -> DVector<T> {
        let mut out = Vec::with_capacity((1 + self.m()) * (1 + self.n_z()) + 1);
        for k in std::iter::once(&self.alpha).chain(&self.beta) {
            out.push(k.variance.ln());
            out.extend(k.lengthscales.iter().map(|l| l.ln()));
        }
        out.push((self.noise_std * self.noise_std).ln());
        DVector::from_vec(out)
    }

    pub fn from_log_vec(theta: &DVector<T>, n_z: usize, m: usize) -> Result<Self> {
        let want = (1 + m) * (1 + n_z) + 1;
        if theta.len() != want {
            return Err(Error::Dimension(format!("expected {want} log-parameters, got {}", theta.len())));
        }
        let block = |b: usize| {
            let o = b * (1 + n_z);
            SeKernel::new(theta[o].exp(), (0..n_z).map(|d| theta[o + 1 + d].exp()).collect())
        };
        Ok(Self {
            alpha: block(0),
            beta: (1..=m).map(block).collect(),
            noise_std: (theta[want - 1] * T::lit(0.5)).exp(),
        })
    }

    pub fn cast<U: Real>(&self) -> AffineKernelParams<U> {
        AffineKernelParams {
            alpha: self.alpha.cast(),
            beta: self.beta.iter().map(SeKernel::cast).collect(),
            noise_std: U::lit(self.noise_std.as_f64()),
        }
    }
}

/// Gram matrix of the affine kernel over columns of `z` and `nu` (no noise).
pub fn gram<T: Real>(params: &AffineKernelParams<T>, z: &DMatrix<T>, nu: &DMatrix<T>) -> DMatrix<T> {
    let n = z.ncols();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = params.kernel_eval(z.column(i).as_slice(), nu.column(i).as_slice(), z.column(j).as_slice(), nu.column(j).as_slice());
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Posterior mean `g1 + g2' nu` and variance `g3 + g4' nu + nu' g5 nu`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaTerms<T: Real> {
    pub g1: T,
    pub g2: DVector<T>,
    pub g3: T,
    pub g4: DVector<T>,
    pub g5: DMatrix<T>,
}

impl<T: Real> GammaTerms<T> {
    pub fn mean(&self, nu: &DVector<T>) -> T {
        self.g1 + self.g2.dot(nu)
    }

    pub fn variance(&self, nu: &DVector<T>) -> T {
        self.g3 + self.g4.dot(nu) + nu.dot(&(&self.g5 * nu))
    }
}

/// Cholesky of `K + (sigma_n^2 + jitter) I`, escalating the jitter from 1e-10.
pub(crate) fn factor_gram<T: Real>(k: &DMatrix<T>, noise_var: T) -> Result<(DMatrix<T>, T)> {
    let n = k.nrows();
    let mut jitter = T::zero();
    for _ in 0..12 {
        let mut a = k.clone();
        for i in 0..n {
            a[(i, i)] += noise_var + jitter;
        }
        if let Some(ch) = a.cholesky() {
            return Ok((ch.l(), jitter));
        }
        jitter = if jitter == T::zero() { T::lit(1e-10) } else { jitter * T::lit(10.0) };
    }
    Err(Error::IllConditioned)
}

/// Conditioned GP for a single output dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGp<T: Real> {
    pub params: AffineKernelParams<T>,
    /// Training flat states, one per column.
    pub z: DMatrix<T>,
    /// Training extended inputs, one per column.
    pub nu: DMatrix<T>,
    pub targets: DVector<T>,
    /// Lower Cholesky factor of the noisy Gram matrix.
    pub chol: DMatrix<T>,
    /// `(K + sigma_n^2 I)^-1 y`.
    pub weights: DVector<T>,
    pub jitter: T,
}

impl<T: Real> OutputGp<T> {
    pub fn condition(params: AffineKernelParams<T>, z: DMatrix<T>, nu: DMatrix<T>, targets: DVector<T>) -> Result<Self> {
        params.validate()?;
        let n = z.ncols();
        if z.nrows() != params.n_z() || nu.nrows() != params.m() || nu.ncols() != n || targets.len() != n {
            return Err(Error::Dimension("training inputs do not match kernel dimensions".into()));
        }
        if z.iter().chain(nu.iter()).chain(targets.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite training data".into()));
        }
        let k = gram(&params, &z, &nu);
        let (chol, jitter) = factor_gram(&k, params.noise_std * params.noise_std)?;
        let weights = cholesky_solve(&chol, &targets);
        Ok(Self { params, z, nu, targets, chol, weights, jitter })
    }

    pub fn n_train(&self) -> usize {
        self.z.ncols()
    }

    /// `k_a(z*, z_l)` and `k_bj(z*, z_l)` for every training point.
    pub fn cross_terms(&self, z_star: &[T]) -> (DVector<T>, DMatrix<T>) {
        let n = self.n_train();
        let m = self.params.m();
        let mut ka = DVector::zeros(n);
        let mut kb = DMatrix::zeros(n, m);
        for l in 0..n {
            let zl = self.z.column(l);
            ka[l] = self.params.alpha.eval(z_star, zl.as_slice());
            for j in 0..m {
                kb[(l, j)] = self.params.beta[j].eval(z_star, zl.as_slice());
            }
        }
        (ka, kb)
    }

    pub fn gamma(&self, z_star: &[T]) -> GammaTerms<T> {
        let n = self.n_train();
        let m = self.params.m();
        let (ka, kb) = self.cross_terms(z_star);
        // B_{l,j} = nu_{l,j} k_bj(z*, z_l)
        let b = DMatrix::from_fn(n, m, |l, j| self.nu[(j, l)] * kb[(l, j)]);
        let g1 = ka.dot(&self.weights);
        let g2 = b.transpose() * &self.weights;
        let mut rhs = DMatrix::zeros(n, m + 1);
        rhs.column_mut(0).copy_from(&ka);
        rhs.view_mut((0, 1), (n, m)).copy_from(&b);
        let v = lower_solve(&self.chol, &rhs);
        let va = v.column(0);
        let vb = v.columns(1, m);
        let g3 = self.params.alpha.variance - va.dot(&va);
        let g4 = -(vb.transpose() * va) * T::lit(2.0);
        let mut g5 = -(vb.transpose() * vb);
        for j in 0..m {
            g5[(j, j)] += self.params.beta[j].variance;
        }
        let g5 = (&g5 + g5.transpose()) * T::lit(0.5);
        GammaTerms { g1, g2, g3, g4, g5 }
    }

    /// Latent posterior mean and variance at `(z*, nu)`.
    pub fn predict(&self, z_star: &[T], nu: &DVector<T>) -> (T, T) {
        let g = self.gamma(z_star);
        (g.mean(nu), g.variance(nu))
    }

    /// `log det(I + K / sigma_n^2) / 2`.
    pub fn information_gain(&self) -> T {
        let n = self.n_train();
        let logdet = (0..n).fold(T::zero(), |a, i| a + self.chol[(i, i)].ln()) * T::lit(2.0);
        T::lit(0.5) * (logdet - T::lit(n as f64) * (self.params.noise_std * self.params.noise_std).ln())
    }
}

pub(crate) fn lower_solve<T: Real>(l: &DMatrix<T>, rhs: &DMatrix<T>) -> DMatrix<T> {
    l.solve_lower_triangular(rhs).unwrap_or_else(|| DMatrix::zeros(rhs.nrows(), rhs.ncols()))
}

pub(crate) fn cholesky_solve<T: Real>(l: &DMatrix<T>, y: &DVector<T>) -> DVector<T> {
    let w = l.solve_lower_triangular(y).unwrap_or_else(|| DVector::zeros(y.len()));
    l.tr_solve_lower_triangular(&w).unwrap_or_else(|| DVector::zeros(y.len()))
}

/// How the scalar multiplier on the posterior standard deviation is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ConfidenceMode {
    Fixed { value: f64 },
    /// `B + 4 sigma_n sqrt(gamma + 1 + ln(1/delta))` with `gamma` the
    /// information gain of the training set.
    Theoretical { rkhs_bound: f64 },
}

impl Default for ConfidenceMode {
    fn default() -> Self {
        ConfidenceMode::Fixed { value: 2.0 }
    }
}

pub fn confidence_multiplier<T: Real>(gp: &OutputGp<T>, mode: ConfidenceMode, delta: T) -> Result<T> {
    if !(delta > T::zero() && delta < T::one()) {
        return Err(Error::InvalidArgument(format!("risk level {} outside (0, 1)", delta.as_f64())));
    }
    match mode {
        ConfidenceMode::Fixed { value } => {
            if !(value > 0.0) {
                return Err(Error::InvalidArgument("confidence multiplier must be positive".into()));
            }
            Ok(T::lit(value))
        }
        ConfidenceMode::Theoretical { rkhs_bound } => {
            let gain = gp.information_gain().max(T::zero());
            let root = (gain + T::one() + (T::one() / delta).ln()).sqrt();
            Ok(T::lit(rkhs_bound) + T::lit(4.0) * gp.params.noise_std * root)
        }
    }
}

/// One independent GP per flat-input component.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGp<T: Real> {
    pub outputs: Vec<OutputGp<T>>,
    /// Multiplier on each output's standard deviation in the stability bound.
    pub confidence: Vec<T>,
}

impl<T: Real> AffineGp<T> {
    pub fn new(outputs: Vec<OutputGp<T>>) -> Result<Self> {
        let first = outputs.first().ok_or_else(|| Error::InvalidArgument("GP without outputs".into()))?;
        let (n_z, m) = (first.params.n_z(), first.params.m());
        if outputs.iter().any(|o| o.params.n_z() != n_z || o.params.m() != m) {
            return Err(Error::Dimension("output GPs disagree on input dimensions".into()));
        }
        let confidence = vec![T::lit(2.0); outputs.len()];
        Ok(Self { outputs, confidence })
    }

    pub fn n_z(&self) -> usize {
        self.outputs[0].params.n_z()
    }

    pub fn m(&self) -> usize {
        self.outputs[0].params.m()
    }

    pub fn set_confidence(&mut self, mode: ConfidenceMode, delta: T) -> Result<()> {
        self.confidence = self
            .outputs
            .iter()
            .map(|o| confidence_multiplier(o, mode, delta))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn gamma_terms(&self, z_star: &DVector<T>) -> Result<Vec<GammaTerms<T>>> {
        if z_star.len() != self.n_z() {
            return Err(Error::Dimension(format!("query state has {} entries, expected {}", z_star.len(), self.n_z())));
        }
        Ok(self.outputs.iter().map(|o| o.gamma(z_star.as_slice())).collect())
    }

    /// Posterior means and variances of every output.
    pub fn predict(&self, z_star: &DVector<T>, nu: &DVector<T>) -> Result<(DVector<T>, DVector<T>)> {
        let g = self.gamma_terms(z_star)?;
        Ok((
            DVector::from_iterator(g.len(), g.iter().map(|t| t.mean(nu))),
            DVector::from_iterator(g.len(), g.iter().map(|t| t.variance(nu))),
        ))
    }
}
