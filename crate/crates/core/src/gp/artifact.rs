//! Versioned JSON artifact of a trained GP.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{AffineGp, AffineKernelParams, OutputGp};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const ARTIFACT_FORMAT: &str = "lbfmpc-affine-gp";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputArtifact {
    pub params: AffineKernelParams<f64>,
    /// Training flat states, one row per sample.
    pub z: Vec<Vec<f64>>,
    pub nu: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    /// Stored `(K + sigma_n^2 I)^-1 y`, checked on load.
    pub weights: Vec<f64>,
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpArtifact {
    pub format: String,
    pub version: u32,
    pub n_z: usize,
    pub m: usize,
    pub confidence: Vec<f64>,
    pub outputs: Vec<OutputArtifact>,
}

fn columns<T: Real>(m: &DMatrix<T>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().map(|x| x.as_f64()).collect()).collect()
}

impl GpArtifact {
    pub fn from_gp<T: Real>(gp: &AffineGp<T>) -> Self {
        Self {
            format: ARTIFACT_FORMAT.into(),
            version: ARTIFACT_VERSION,
            n_z: gp.n_z(),
            m: gp.m(),
            confidence: gp.confidence.iter().map(|c| c.as_f64()).collect(),
            outputs: gp
                .outputs
                .iter()
                .map(|o| OutputArtifact {
                    params: o.params.cast(),
                    z: columns(&o.z),
                    nu: columns(&o.nu),
                    targets: o.targets.iter().map(|x| x.as_f64()).collect(),
                    weights: o.weights.iter().map(|x| x.as_f64()).collect(),
                    jitter: o.jitter.as_f64(),
                })
                .collect(),
        }
    }

    /// Refactor the Gram matrices and verify the stored solves.
    pub fn to_gp<T: Real>(&self) -> Result<AffineGp<T>> {
        if self.format != ARTIFACT_FORMAT {
            return Err(Error::Config(format!("not a GP artifact: format '{}'", self.format)));
        }
        if self.version != ARTIFACT_VERSION {
            return Err(Error::Config(format!("unsupported GP artifact version {}", self.version)));
        }
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for (i, o) in self.outputs.iter().enumerate() {
            let n = o.targets.len();
            if o.z.len() != n || o.nu.len() != n || o.weights.len() != n {
                return Err(Error::Config(format!("output {i}: inconsistent sample counts")));
            }
            if o.z.iter().any(|r| r.len() != self.n_z) || o.nu.iter().any(|r| r.len() != self.m) {
                return Err(Error::Config(format!("output {i}: sample dimensions differ from header")));
            }
            let z = DMatrix::from_fn(self.n_z, n, |d, l| T::lit(o.z[l][d]));
            let nu = DMatrix::from_fn(self.m, n, |d, l| T::lit(o.nu[l][d]));
            let y = DVector::from_iterator(n, o.targets.iter().map(|&x| T::lit(x)));
            let gp = OutputGp::condition(o.params.cast(), z, nu, y)?;
            let scale = o.weights.iter().fold(1.0f64, |a, w| a.max(w.abs()));
            let err = gp
                .weights
                .iter()
                .zip(&o.weights)
                .fold(0.0f64, |a, (w, s)| a.max((w.as_f64() - s).abs()));
            if err > 1e-6 * scale {
                return Err(Error::Config(format!("output {i}: stored solve does not match refactored model ({err:e})")));
            }
            outputs.push(gp);
        }
        let mut gp = AffineGp::new(outputs)?;
        if self.confidence.len() != gp.outputs.len() {
            return Err(Error::Config("confidence multipliers do not match outputs".into()));
        }
        gp.confidence = self.confidence.iter().map(|&c| T::lit(c)).collect();
        Ok(gp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
