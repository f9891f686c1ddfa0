//! Training data: sampling around the reference and CSV exchange.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrotor::{invert_psi, psi_true, QuadParams, ReferenceTrajectory};
use crate::scalar::Real;

/// One labelled sample `(z, nu) -> v`.
#[derive(Debug, Clone, PartialEq)]
pub struct GpDataPoint<T: Real> {
    pub z: DVector<T>,
    pub nu: DVector<T>,
    pub v: DVector<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset<T: Real> {
    pub points: Vec<GpDataPoint<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn dims(&self) -> Result<(usize, usize, usize)> {
        let p = self.points.first().ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
        let dims = (p.z.len(), p.nu.len(), p.v.len());
        for q in &self.points {
            if (q.z.len(), q.nu.len(), q.v.len()) != dims {
                return Err(Error::Dimension("dataset rows differ in shape".into()));
            }
            if q.z.iter().chain(q.nu.iter()).chain(q.v.iter()).any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument("dataset contains non-finite values".into()));
            }
        }
        Ok(dims)
    }

    pub fn m_out(&self) -> usize {
        self.points.first().map_or(0, |p| p.v.len())
    }

    /// Flat states and inputs, one sample per column.
    pub fn inputs(&self) -> Result<(DMatrix<T>, DMatrix<T>)> {
        let (n_z, m, _) = self.dims()?;
        let n = self.len();
        Ok((
            DMatrix::from_fn(n_z, n, |d, l| self.points[l].z[d]),
            DMatrix::from_fn(m, n, |d, l| self.points[l].nu[d]),
        ))
    }

    pub fn targets(&self, i: usize) -> DVector<T> {
        DVector::from_iterator(self.len(), self.points.iter().map(|p| p.v[i]))
    }

    /// Split off every `k`-th point (starting at `offset`) as a held-out set.
    pub fn split_every(&self, k: usize, offset: usize) -> (Self, Self) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, p) in self.points.iter().enumerate() {
            if k > 0 && i % k == offset % k {
                test.push(p.clone());
            } else {
                train.push(p.clone());
            }
        }
        (Self { points: train }, Self { points: test })
    }

    /// CSV with header `z0.., nu0.., v0..`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let (n_z, m, m_out) = self.dims()?;
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..n_z).map(|i| format!("z{i}")).collect();
        header.extend((0..m).map(|i| format!("nu{i}")));
        header.extend((0..m_out).map(|i| format!("v{i}")));
        w.write_record(&header)?;
        for p in &self.points {
            w.write_record(p.z.iter().chain(p.nu.iter()).chain(p.v.iter()).map(|x| format!("{:e}", x.as_f64())))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let count = |prefix: &str| {
            header
                .iter()
                .filter(|h| h.strip_prefix(prefix).is_some_and(|rest| rest.parse::<usize>().is_ok()))
                .count()
        };
        let (n_z, m, m_out) = (count("z"), count("nu"), count("v"));
        if n_z + m + m_out != header.len() || n_z == 0 || m == 0 || m_out == 0 {
            return Err(Error::Config(format!("unexpected dataset header: {}", header.iter().collect::<Vec<_>>().join(","))));
        }
        for (i, h) in header.iter().enumerate() {
            let want = if i < n_z {
                format!("z{i}")
            } else if i < n_z + m {
                format!("nu{}", i - n_z)
            } else {
                format!("v{}", i - n_z - m)
            };
            if h != want {
                return Err(Error::Config(format!("dataset column {i} is '{h}', expected '{want}'")));
            }
        }
        let mut points = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad number '{s}': {e}"))))
                .collect::<Result<_>>()?;
            let lift = |s: &[f64]| DVector::from_iterator(s.len(), s.iter().map(|&x| T::lit(x)));
            points.push(GpDataPoint {
                z: lift(&vals[..n_z]),
                nu: lift(&vals[n_z..n_z + m]),
                v: lift(&vals[n_z + m..]),
            });
        }
        let data = Self { points };
        data.dims()?;
        Ok(data)
    }
}

/// How training points are drawn around the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub n: usize,
    /// Standard deviation of the Gaussian perturbation of each flat-state entry.
    pub z_jitter: Vec<f64>,
    /// Standard deviation of the perturbation of the reference extended input.
    pub nu_jitter: Vec<f64>,
    pub nu_min: Vec<f64>,
    pub nu_max: Vec<f64>,
    /// Standard deviation of the observation noise on the targets.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n: 600,
            z_jitter: vec![0.05, 0.1, 0.3, 1.0, 0.05, 0.1, 0.3, 1.0],
            nu_jitter: vec![1.0, 0.05],
            nu_min: vec![-5.0, -0.4],
            nu_max: vec![5.0, 0.4],
            noise_std: 0.01,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    fn validate(&self, n_z: usize, m: usize) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("at least one training point is required".into()));
        }
        if self.z_jitter.len() != n_z || self.nu_jitter.len() != m || self.nu_min.len() != m || self.nu_max.len() != m {
            return Err(Error::Config("sampling jitter and box dimensions do not match the model".into()));
        }
        let bad = |x: &f64| !(*x >= 0.0 && x.is_finite());
        if self.z_jitter.iter().chain(&self.nu_jitter).any(bad) || bad(&self.noise_std) {
            return Err(Error::Config("jitter scales must be finite and non-negative".into()));
        }
        if self.nu_min.iter().zip(&self.nu_max).any(|(a, b)| !(a <= b)) {
            return Err(Error::Config("nu box has lower > upper".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).map(|d| d.sample(rng)).unwrap_or(0.0)
}

/// Draw labelled points near the reference with the true flat input map.
pub fn sample_training_data<T: Real>(
    reference: &ReferenceTrajectory<T>,
    params: &QuadParams<T>,
    cfg: &SamplingConfig,
) -> Result<Dataset<T>> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("empty reference".into()));
    }
    let n_z = reference.z_ref[0].len();
    let m = reference.v_ref[0].len();
    cfg.validate(n_z, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut points = Vec::with_capacity(cfg.n);
    let max_attempts = 100 * cfg.n;
    let mut attempts = 0;
    while points.len() < cfg.n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidArgument("too many samples violate the minimum specific force".into()));
        }
        let k = rng.random_range(0..reference.len());
        let z = DVector::from_fn(n_z, |d, _| reference.z_ref[k][d] + T::lit(gaussian(&mut rng, cfg.z_jitter[d])));
        let nu_ref = match invert_psi(&reference.z_ref[k], &reference.v_ref[k], params) {
            Ok(nu) => nu,
            Err(_) => continue,
        };
        let nu = DVector::from_fn(m, |j, _| {
            let x = nu_ref[j].as_f64() + gaussian(&mut rng, cfg.nu_jitter[j]);
            T::lit(x.clamp(cfg.nu_min[j], cfg.nu_max[j]))
        });
        let Ok(eval) = psi_true(&z, &nu, params) else { continue };
        let v = DVector::from_fn(m, |i, _| eval.v[i] + T::lit(gaussian(&mut rng, cfg.noise_std)));
        points.push(GpDataPoint { z, nu, v });
    }
    Ok(Dataset { points })
}
