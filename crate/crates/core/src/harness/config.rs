//! JSON run configuration.

use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::FilterConfig;
use crate::flat::{assemble_flat_lti, riccati_synthesis, DiscreteFlatLti, ExtensionSpec, FlatSpec, RiccatiResult};
use crate::fmpc::{HalfSpace, MpcSetup};
use crate::gp::{ConfidenceMode, FitOptions, SamplingConfig};
use crate::quadrotor::{lemniscate_reference, Lemniscate, QuadParams, ReferenceTrajectory};
use crate::stats::normal_quantile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub sampling: SamplingConfig,
    pub fit: FitOptions,
    pub confidence: ConfidenceMode,
    /// Risk level per output used by the theoretical confidence multiplier.
    pub delta: f64,
    pub holdout: usize,
    /// Largest accepted held-out RMSE relative to the output range.
    pub rmse_gate: f64,
    /// Reported next to the coverage figures; not enforced by `train`.
    pub coverage_target: f64,
    /// Trained artifact to load in learned mode.
    pub artifact: Option<String>,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingConfig::default(),
            fit: FitOptions { restarts: 1, ..FitOptions::default() },
            confidence: ConfidenceMode::default(),
            delta: 0.01,
            holdout: 200,
            rmse_gate: 0.05,
            coverage_target: 0.85,
            artifact: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    /// Violation probability per half-space.
    pub delta_constraint: f64,
    /// Probability of the quantile in the Lipschitz bound.
    pub delta_bar: f64,
    /// Required Lyapunov decrease.
    pub epsilon: f64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self { delta_constraint: 0.01, delta_bar: 0.99, epsilon: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintConfig {
    pub half_spaces: Vec<HalfSpace<f64>>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub nu_min: Vec<f64>,
    pub nu_max: Vec<f64>,
    pub tighten_overshoot: bool,
    /// Soften MPC half-spaces with this slack price.
    pub mpc_slack: Option<f64>,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            half_spaces: Vec::new(),
            u_min: vec![0.05, -0.4],
            u_max: vec![0.6, 0.4],
            nu_min: vec![-5.0, -0.4],
            nu_max: vec![5.0, 0.4],
            tighten_overshoot: true,
            mpc_slack: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSettings {
    pub fallback: bool,
    pub max_consecutive_infeasible: usize,
    /// Impose the Lyapunov decrease at all.
    pub lyapunov: bool,
    /// Impose the Lyapunov decrease only when no MPC half-space row is active.
    pub lyapunov_when_unconstrained: bool,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self { fallback: true, max_consecutive_infeasible: 5, lyapunov: true, lyapunov_when_unconstrained: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plant: QuadParams<f64>,
    pub flat: FlatSpec<f64>,
    /// Extension order per system input (`[2, 0]`: thrust twice, roll command passed through).
    pub extension: Vec<usize>,
    pub horizon: usize,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub reference: Lemniscate<f64>,
    pub episode_periods: f64,
    /// Radius of the uniform position and velocity perturbation at the start.
    pub init_radius: f64,
    /// Start hovering at the reference start point instead.
    pub hover_start: bool,
    pub trials: usize,
    pub seed: u64,
    /// RK4 substeps per control period.
    pub substeps: usize,
    pub gp: GpConfig,
    pub risk: RiskConfig,
    pub constraints: ConstraintConfig,
    pub filter: FilterSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            plant: QuadParams::default(),
            flat: FlatSpec { rho: vec![4, 4], dt: 0.01 },
            extension: vec![2, 0],
            horizon: 50,
            q_diag: vec![1000.0, 100.0, 1.0, 0.01, 1000.0, 100.0, 1.0, 0.01],
            r_diag: vec![1e-4, 1e-4],
            reference: Lemniscate { amplitude_x: 1.0, amplitude_z: 0.5, period: 6.0, center_x: 0.0, center_z: 1.0 },
            episode_periods: 2.0,
            init_radius: 0.05,
            hover_start: false,
            trials: 30,
            seed: 0,
            substeps: 10,
            gp: GpConfig::default(),
            risk: RiskConfig::default(),
            constraints: ConstraintConfig::default(),
            filter: FilterSettings::default(),
        }
    }
}

impl RunConfig {
    /// Half-space `x <= 0.8` and thrust command capped at `0.37`.
    pub fn constrained() -> Self {
        let mut cfg = Self::default();
        cfg.constraints.half_spaces = vec![HalfSpace { h: vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], b: 0.8 }];
        cfg.constraints.u_max[0] = 0.37;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dt(&self) -> f64 {
        self.flat.dt
    }

    /// Control steps per episode.
    pub fn n_steps(&self) -> usize {
        (self.episode_periods * self.reference.period / self.dt()).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        self.plant.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.flat.rho != [4, 4] {
            return bad("the planar quadrotor has flat chains of order [4, 4]");
        }
        if self.extension != [2, 0] {
            return bad("the planar quadrotor uses extension orders [2, 0]");
        }
        if !(self.flat.dt > 0.0 && self.flat.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.horizon == 0 || self.trials == 0 || self.substeps == 0 {
            return bad("horizon, trials and substeps must be >= 1");
        }
        let n = 8;
        let m = 2;
        if self.q_diag.len() != n || self.r_diag.len() != m {
            return bad("q_diag needs 8 entries and r_diag 2");
        }
        if self.q_diag.iter().chain(&self.r_diag).any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad("weights must be positive and finite");
        }
        if !(self.reference.period > 0.0) || !(self.episode_periods > 0.0) {
            return bad("reference period and episode length must be positive");
        }
        if self.n_steps() == 0 {
            return bad("episode shorter than one step");
        }
        if !(self.init_radius >= 0.0 && self.init_radius.is_finite()) {
            return bad("init_radius must be non-negative");
        }
        let c = &self.constraints;
        if [&c.u_min, &c.u_max, &c.nu_min, &c.nu_max].iter().any(|v| v.len() != m) {
            return bad("input and extended-input bounds need 2 entries");
        }
        if c.u_min.iter().zip(&c.u_max).any(|(a, b)| !(a <= b)) {
            return bad("u_min exceeds u_max");
        }
        if c.nu_min.iter().zip(&c.nu_max).any(|(a, b)| !(a < b)) {
            return bad("nu_min must be below nu_max");
        }
        for hs in &c.half_spaces {
            if hs.h.len() != n || hs.h.iter().any(|x| !x.is_finite()) || !hs.b.is_finite() {
                return bad("half-space rows need 8 finite coefficients and a finite bound");
            }
        }
        if let Some(w) = c.mpc_slack {
            if !(w > 0.0) {
                return bad("mpc_slack must be positive");
            }
        }
        let r = &self.risk;
        for p in [r.delta_constraint, r.delta_bar, self.gp.delta] {
            if !(p > 0.0 && p < 1.0) {
                return bad("risk levels must lie in (0, 1)");
            }
        }
        if !(r.epsilon >= 0.0) {
            return bad("epsilon must be non-negative");
        }
        if self.gp.holdout == 0 || self.gp.sampling.n == 0 {
            return bad("training and held-out sets must be non-empty");
        }
        if !(self.gp.rmse_gate > 0.0) {
            return bad("rmse_gate must be positive");
        }
        Ok(())
    }

    pub fn lti(&self) -> Result<DiscreteFlatLti<f64>> {
        assemble_flat_lti(&self.flat)
    }

    pub fn extension_spec(&self) -> Result<ExtensionSpec<f64>> {
        ExtensionSpec::new(self.extension.clone(), self.dt())
    }

    pub fn weights(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            DMatrix::from_diagonal(&DVector::from_column_slice(&self.q_diag)),
            DMatrix::from_diagonal(&DVector::from_column_slice(&self.r_diag)),
        )
    }

    pub fn mpc_setup(&self) -> Result<MpcSetup<f64>> {
        let (q, r) = self.weights();
        Ok(MpcSetup {
            lti: self.lti()?,
            q,
            r,
            horizon: self.horizon,
            constraints: self.constraints.half_spaces.clone(),
            slack_penalty: self.constraints.mpc_slack,
        })
    }

    pub fn riccati(&self) -> Result<RiccatiResult<f64>> {
        let (q, r) = self.weights();
        riccati_synthesis(&self.lti()?, &q, &r, self.horizon)
    }

    pub fn filter_config(&self) -> Result<FilterConfig<f64>> {
        let c = &self.constraints;
        let rho = normal_quantile(1.0 - self.risk.delta_constraint)?;
        Ok(FilterConfig {
            epsilon: self.risk.epsilon,
            rho_bar: normal_quantile(self.risk.delta_bar)?,
            state_quantiles: vec![rho; c.half_spaces.len()],
            nu_min: DVector::from_column_slice(&c.nu_min),
            nu_max: DVector::from_column_slice(&c.nu_max),
            u_min: DVector::from_column_slice(&c.u_min),
            u_max: DVector::from_column_slice(&c.u_max),
            tighten_overshoot: c.tighten_overshoot,
            fallback: self.filter.fallback,
        })
    }

    /// Episode reference plus one horizon of lookahead.
    pub fn episode_reference(&self) -> Result<ReferenceTrajectory<f64>> {
        lemniscate_reference(&self.reference, self.dt(), self.n_steps() + self.horizon + 1)
    }

    /// One period of the reference, used to place training data.
    pub fn sampling_reference(&self) -> Result<ReferenceTrajectory<f64>> {
        let n = (self.reference.period / self.dt()).round().max(1.0) as usize;
        lemniscate_reference(&self.reference, self.dt(), n)
    }
}

/// Input path of the closed loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// GP model and safety filter.
    Learned,
    /// Exact inversion of the true flat input map.
    ExactPsi,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Learned => "learned",
            Mode::ExactPsi => "exact-psi",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Mode::Learned),
            "exact-psi" | "exact" => Ok(Mode::ExactPsi),
            other => Err(Error::Config(format!("unknown mode '{other}' (learned | exact-psi)"))),
        }
    }
}
