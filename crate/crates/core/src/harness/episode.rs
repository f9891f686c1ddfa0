//! Closed-loop episodes: flat MPC, filter or exact inversion, extension, plant.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Mode, RunConfig};
use crate::conic::{InteriorPoint, SolveStatus};
use crate::error::{Error, Result};
use crate::filter::{filter_step_from, FilterLevel, FilterResult};
use crate::flat::lyapunov_value;
use crate::fmpc::FlatMpc;
use crate::gp::AffineGp;
use crate::quadrotor::{flat_to_physical, integrate, invert_psi, physical_to_flat, PhysState};

/// Slack below which a filter constraint counts as active.
const ACTIVE_TOL: f64 = 1e-6;

/// How the applied extended input was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSource {
    Filter(FilterLevel),
    Exact,
    /// Previous input re-applied.
    Hold,
}

impl StepSource {
    pub fn as_str(self) -> &'static str {
        match self {
            StepSource::Filter(FilterLevel::Full) => "full",
            StepSource::Filter(FilterLevel::NoLyapunov) => "no_lyapunov",
            StepSource::Filter(FilterLevel::InputsOnly) => "inputs_only",
            StepSource::Filter(FilterLevel::Hold) | StepSource::Hold => "hold",
            StepSource::Exact => "exact",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "full" => StepSource::Filter(FilterLevel::Full),
            "no_lyapunov" => StepSource::Filter(FilterLevel::NoLyapunov),
            "inputs_only" => StepSource::Filter(FilterLevel::InputsOnly),
            "hold" => StepSource::Hold,
            "exact" => StepSource::Exact,
            _ => return None,
        })
    }

    pub fn is_hold(self) -> bool {
        matches!(self, StepSource::Hold | StepSource::Filter(FilterLevel::Hold))
    }

    /// Optimal filter solve with the Lyapunov constraint.
    pub fn lyapunov_enforced(self) -> bool {
        self == StepSource::Filter(FilterLevel::Full)
    }

    /// Optimal filter solve with the tightened half-spaces.
    pub fn state_enforced(self) -> bool {
        matches!(self, StepSource::Filter(FilterLevel::Full | FilterLevel::NoLyapunov))
    }

    /// Optimal filter solve with the input rows.
    pub fn inputs_enforced(self) -> bool {
        matches!(self, StepSource::Filter(FilterLevel::Full | FilterLevel::NoLyapunov | FilterLevel::InputsOnly))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub k: usize,
    pub t: f64,
    pub z_hat: Vec<f64>,
    pub z_ref: Vec<f64>,
    pub v_star: Vec<f64>,
    /// Applied extended input.
    pub nu: Vec<f64>,
    pub eta_prev: Vec<f64>,
    /// Applied system input `C (A eta_prev + B nu)`.
    pub u: Vec<f64>,
    pub lyapunov: f64,
    pub lyapunov_next: f64,
    pub mpc_status: SolveStatus,
    pub mpc_gap: f64,
    pub mpc_residual: f64,
    pub source: StepSource,
    pub filter_status: Option<SolveStatus>,
    pub filter_gap: Option<f64>,
    pub filter_residual: Option<f64>,
    /// Half-space tightening at the applied input.
    pub margins: Vec<f64>,
    /// Filter constraints with zero slack, as `soc:i` / `lin:j`.
    pub active: Vec<String>,
    /// Largest `h' z_{k+1} - b` on the plant.
    pub violation_next: f64,
    /// Largest excursion of the continuous thrust command outside `[u_min, u_max]` during the step.
    pub thrust_excess: f64,
    /// Thrust command at an enforced (possibly tightened) bound.
    pub thrust_bound_active: bool,
    pub fmpc_us: f64,
    pub filter_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: usize,
    pub aborted: bool,
    /// Position RMSE over the whole episode, m.
    pub rmse: f64,
    /// Position RMSE with the first 10% of steps dropped.
    pub rmse_post: f64,
    /// Largest half-space violation over steps that enforced the half-spaces.
    pub max_violation: Option<f64>,
    /// Largest half-space violation over every step.
    pub max_violation_all: Option<f64>,
    /// Largest bound excess of `u` over steps that enforced the input rows.
    pub max_input_violation: Option<f64>,
    /// Share of Lyapunov-enforcing steps with `V(e_{k+1}) < V(e_k)`.
    pub lyapunov_decrease: Option<f64>,
    pub full_steps: usize,
    pub no_lyapunov_steps: usize,
    pub inputs_only_steps: usize,
    pub infeasible_steps: usize,
    pub mpc_failures: usize,
    /// Largest excursion of the continuous thrust command beyond its bounds.
    pub thrust_overshoot: f64,
    /// Largest duality gap and primal residual over optimal MPC and filter solves.
    pub max_gap: f64,
    pub max_residual: f64,
    /// `rate^2 / (2 acc_max)` maximized over steps at or past the thrust bound.
    pub overshoot_bound: f64,
    pub fmpc_mean_us: f64,
    pub fmpc_p95_us: f64,
    pub filter_mean_us: f64,
    pub filter_p95_us: f64,
    pub step_mean_us: f64,
    pub step_p95_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub mode: Mode,
    pub seed: u64,
    pub steps: Vec<StepLog>,
    pub metrics: RunMetrics,
}

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Uniform sample of the disk of radius `r`.
fn disk(rng: &mut ChaCha8Rng, r: f64) -> (f64, f64) {
    let rad = r * rng.random::<f64>().sqrt();
    let ang = std::f64::consts::TAU * rng.random::<f64>();
    (rad * ang.cos(), rad * ang.sin())
}

/// Initial plant state and extension state for a trial.
pub fn initial_state(cfg: &RunConfig, seed: u64) -> Result<(PhysState<f64>, DVector<f64>)> {
    let reference = cfg.sampling_reference()?;
    let p = &cfg.plant;
    let z_ref = &reference.z_ref[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dx, dz) = disk(&mut rng, cfg.init_radius);
    let (dvx, dvz) = disk(&mut rng, cfg.init_radius);
    let z0 = if cfg.hover_start {
        DVector::from_vec(vec![z_ref[0] + dx, 0.0, 0.0, 0.0, z_ref[4] + dz, 0.0, 0.0, 0.0])
    } else {
        let mut z = z_ref.clone();
        z[0] += dx;
        z[1] += dvx;
        z[4] += dz;
        z[5] += dvz;
        z
    };
    let (s, thrust, rate) = flat_to_physical(&z0, p)?;
    let theta_c = invert_psi(&z0, &reference.v_ref[0], p).map(|nu| nu[1]).unwrap_or(s.theta);
    Ok((s, DVector::from_vec(vec![thrust, rate, theta_c])))
}

fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn position_rmse(steps: &[StepLog]) -> f64 {
    if steps.is_empty() {
        return 0.0;
    }
    let se: f64 = steps
        .iter()
        .map(|s| (s.z_hat[0] - s.z_ref[0]).powi(2) + (s.z_hat[4] - s.z_ref[4]).powi(2))
        .sum();
    (se / steps.len() as f64).sqrt()
}

/// Summary of a step log.
pub fn metrics(cfg: &RunConfig, steps: &[StepLog], aborted: bool) -> RunMetrics {
    let c = &cfg.constraints;
    let skip = steps.len() / 10;
    let count = |f: &dyn Fn(&StepLog) -> bool| steps.iter().filter(|s| f(s)).count();
    let max_over = |f: &dyn Fn(&StepLog) -> Option<f64>| steps.iter().filter_map(f).reduce(f64::max);

    let lyap_steps: Vec<&StepLog> = steps.iter().filter(|s| s.source.lyapunov_enforced()).collect();
    let lyapunov_decrease = (!lyap_steps.is_empty())
        .then(|| lyap_steps.iter().filter(|s| s.lyapunov_next < s.lyapunov).count() as f64 / lyap_steps.len() as f64);

    let max_input_violation = max_over(&|s| {
        s.source.inputs_enforced().then(|| {
            (0..s.u.len()).fold(f64::NEG_INFINITY, |a, i| a.max(s.u[i] - c.u_max[i]).max(c.u_min[i] - s.u[i]))
        })
    });
    let overshoot_bound = max_over(&|s| {
        (s.thrust_bound_active || s.thrust_excess > 0.0).then(|| {
            let rate = s.eta_prev[1];
            let acc = if rate > 0.0 { -c.nu_min[0] } else { c.nu_max[0] };
            rate * rate / (2.0 * acc)
        })
    });

    let certificate = |f: &dyn Fn(&StepLog) -> [Option<f64>; 2]| {
        steps.iter().flat_map(|s| f(s)).flatten().fold(0.0, f64::max)
    };
    let filter_optimal = |s: &StepLog| s.filter_status.is_some_and(|st| st.is_optimal());
    let max_gap = certificate(&|s| {
        [s.mpc_status.is_optimal().then_some(s.mpc_gap), s.filter_gap.filter(|_| filter_optimal(s))]
    });
    let max_residual = certificate(&|s| {
        [s.mpc_status.is_optimal().then_some(s.mpc_residual), s.filter_residual.filter(|_| filter_optimal(s))]
    });

    let fmpc: Vec<f64> = steps.iter().map(|s| s.fmpc_us).collect();
    let filt: Vec<f64> = steps.iter().map(|s| s.filter_us).collect();
    let total: Vec<f64> = steps.iter().map(|s| s.fmpc_us + s.filter_us).collect();
    RunMetrics {
        steps: steps.len(),
        aborted,
        rmse: position_rmse(steps),
        rmse_post: position_rmse(&steps[skip.min(steps.len())..]),
        max_violation: max_over(&|s| s.source.state_enforced().then_some(s.violation_next)),
        max_violation_all: max_over(&|s| Some(s.violation_next)),
        max_input_violation,
        lyapunov_decrease,
        full_steps: lyap_steps.len(),
        no_lyapunov_steps: count(&|s| s.source == StepSource::Filter(FilterLevel::NoLyapunov)),
        inputs_only_steps: count(&|s| s.source == StepSource::Filter(FilterLevel::InputsOnly)),
        infeasible_steps: count(&|s| s.source.is_hold()),
        mpc_failures: count(&|s| !s.mpc_status.is_optimal()),
        thrust_overshoot: max_over(&|s| Some(s.thrust_excess)).unwrap_or(0.0).max(0.0),
        overshoot_bound: overshoot_bound.unwrap_or(0.0).max(0.0),
        max_gap,
        max_residual,
        fmpc_mean_us: mean(&fmpc),
        fmpc_p95_us: percentile(&fmpc, 0.95),
        filter_mean_us: mean(&filt),
        filter_p95_us: percentile(&filt, 0.95),
        step_mean_us: mean(&total),
        step_p95_us: percentile(&total, 0.95),
    }
}

/// Largest excursion of `T(t) = T0 + rate t + acc t^2 / 2` on `[0, dt]` outside `[lo, hi]`.
fn thrust_excess(t0: f64, rate: f64, acc: f64, dt: f64, lo: f64, hi: f64) -> f64 {
    let at = |t: f64| t0 + rate * t + 0.5 * acc * t * t;
    let mut vals = vec![at(0.0), at(dt)];
    if acc != 0.0 {
        let ts = -rate / acc;
        if ts > 0.0 && ts < dt {
            vals.push(at(ts));
        }
    }
    vals.iter().fold(0.0f64, |e, &v| e.max(v - hi).max(lo - v))
}

/// Per-step callback receiving the filter outcome.
pub type FilterObserver<'a> = &'a mut dyn FnMut(usize, &FilterResult<f64>);

/// Run one episode. Learned mode requires `gp`.
pub fn run_episode(cfg: &RunConfig, mode: Mode, gp: Option<&AffineGp<f64>>, seed: u64) -> Result<Episode> {
    run_episode_observed(cfg, mode, gp, seed, None)
}

pub fn run_episode_observed(
    cfg: &RunConfig,
    mode: Mode,
    gp: Option<&AffineGp<f64>>,
    seed: u64,
    mut observer: Option<FilterObserver<'_>>,
) -> Result<Episode> {
    cfg.validate()?;
    let gp = match (mode, gp) {
        (Mode::Learned, None) => return Err(Error::Config("learned mode needs a trained GP".into())),
        (_, g) => g,
    };
    let p = cfg.plant;
    let dt = cfg.dt();
    let lti = cfg.lti()?;
    let ext = cfg.extension_spec()?;
    let riccati = cfg.riccati()?;
    let fcfg = cfg.filter_config()?;
    let reference = cfg.episode_reference()?;
    let mut mpc = FlatMpc::new(cfg.mpc_setup()?)?;
    let mut backend = InteriorPoint::<f64>::new();
    let cons = &cfg.constraints;
    let n_steps = cfg.n_steps();

    let (mut s, mut eta_prev) = initial_state(cfg, seed)?;
    let z0 = physical_to_flat(&s, eta_prev[0], eta_prev[1], &p);
    let mut nu_prev = invert_psi(&z0, &reference.v_ref[0], &p)
        .map(|nu| nu.zip_zip_map(&fcfg.nu_min, &fcfg.nu_max, |x, lo, hi| x.clamp(lo, hi)))
        .unwrap_or_else(|_| DVector::from_vec(vec![0.0, eta_prev[2]]));

    let violation = |z: &DVector<f64>| {
        cons.half_spaces
            .iter()
            .map(|hs| hs.h.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>() - hs.b)
            .fold(f64::NEG_INFINITY, f64::max)
    };

    let mut steps = Vec::with_capacity(n_steps);
    let mut consecutive = 0usize;
    let mut aborted = false;
    for k in 0..n_steps {
        let z_hat = physical_to_flat(&s, eta_prev[0], eta_prev[1], &p);
        let (z_win, v_win) = reference.window(k, cfg.horizon);
        let lyap = lyapunov_value(&riccati.p, &(&z_hat - &z_win[0]));

        let clock = Instant::now();
        let sol = mpc
            .solve(&z_hat, &z_win, &v_win)
            .map_err(|e| Error::SolverFailure { step: k, message: format!("flat MPC: {e}") })?;
        let fmpc_us = clock.elapsed().as_secs_f64() * 1e6;

        let clock = Instant::now();
        let mut filter_status = None;
        let mut filter_cert = (None, None);
        let mut margins = vec![0.0; cons.half_spaces.len()];
        let mut active = Vec::new();
        let mut bound_active = false;
        let chosen: Option<(DVector<f64>, StepSource)> = if !sol.status.is_optimal() {
            None
        } else {
            match mode {
                Mode::ExactPsi => invert_psi(&z_hat, &sol.v_star, &p)
                    .ok()
                    .map(|nu| (nu.zip_zip_map(&fcfg.nu_min, &fcfg.nu_max, |x, lo, hi| x.clamp(lo, hi)), StepSource::Exact)),
                Mode::Learned => {
                    let gp = gp.ok_or_else(|| Error::Config("learned mode needs a trained GP".into()))?;
                    let first = if !cfg.filter.lyapunov || (cfg.filter.lyapunov_when_unconstrained && !sol.active.is_empty()) {
                        FilterLevel::NoLyapunov
                    } else {
                        FilterLevel::Full
                    };
                    let res = filter_step_from(
                        first,
                        &z_hat,
                        &sol.v_star,
                        &z_win[0],
                        &v_win[0],
                        gp,
                        &lti,
                        &riccati,
                        &cons.half_spaces,
                        &ext,
                        &eta_prev,
                        &fcfg,
                        &mut backend,
                    )
                    .map_err(|e| Error::SolverFailure { step: k, message: format!("safety filter: {e}") })?;
                    if let Some(obs) = observer.as_mut() {
                        obs(k, &res);
                    }
                    filter_status = Some(res.status);
                    filter_cert = (Some(res.report.gap), Some(res.report.primal_residual));
                    margins = res.margins.clone();
                    for (i, sl) in res.cone_slacks.iter().enumerate() {
                        if *sl <= ACTIVE_TOL {
                            active.push(format!("soc:{i}"));
                        }
                    }
                    for (j, sl) in res.linear_slacks.iter().enumerate() {
                        if *sl <= ACTIVE_TOL {
                            active.push(format!("lin:{j}"));
                        }
                    }
                    if let (Some(u), Some(nu)) = (&res.u, &res.nu_star) {
                        bound_active = res.inputs.upper_slack(0, u, nu) <= ACTIVE_TOL
                            || res.inputs.lower_slack(0, u, nu) <= ACTIVE_TOL;
                    }
                    res.nu_star.map(|nu| (nu, StepSource::Filter(res.level)))
                }
            }
        };
        let filter_us = clock.elapsed().as_secs_f64() * 1e6;

        let (nu, source) = chosen.unwrap_or_else(|| (nu_prev.clone(), StepSource::Hold));
        let (eta, u) = ext.step(&eta_prev, &nu)?;
        let (s_next, _) = integrate(&s, &eta_prev, &nu, dt, &p, cfg.substeps);
        let z_next = physical_to_flat(&s_next, eta[0], eta[1], &p);
        let lyap_next = lyapunov_value(&riccati.p, &(&z_next - &reference.z_ref[(k + 1).min(reference.len() - 1)]));
        let excess = thrust_excess(eta_prev[0], eta_prev[1], nu[0], dt, cons.u_min[0], cons.u_max[0]);

        steps.push(StepLog {
            k,
            t: k as f64 * dt,
            z_hat: to_vec(&z_hat),
            z_ref: to_vec(&z_win[0]),
            v_star: to_vec(&sol.v_star),
            nu: to_vec(&nu),
            eta_prev: to_vec(&eta_prev),
            u: to_vec(&u),
            lyapunov: lyap,
            lyapunov_next: lyap_next,
            mpc_status: sol.status,
            mpc_gap: sol.report.gap,
            mpc_residual: sol.report.primal_residual,
            source,
            filter_status,
            filter_gap: filter_cert.0,
            filter_residual: filter_cert.1,
            margins,
            active,
            violation_next: if cons.half_spaces.is_empty() { 0.0 } else { violation(&z_next) },
            thrust_excess: excess,
            thrust_bound_active: bound_active,
            fmpc_us,
            filter_us,
        });

        if !s_next.is_finite() {
            return Err(Error::SolverFailure { step: k, message: "plant state diverged".into() });
        }
        consecutive = if source.is_hold() { consecutive + 1 } else { 0 };
        if consecutive > cfg.filter.max_consecutive_infeasible {
            aborted = true;
            break;
        }
        s = s_next;
        eta_prev = eta;
        nu_prev = nu;
    }
    let metrics = metrics(cfg, &steps, aborted);
    Ok(Episode { mode, seed, steps, metrics })
}

/// Seed of trial `i`.
pub fn trial_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// `cfg.trials` episodes with consecutive trial seeds.
pub fn run_trials(cfg: &RunConfig, mode: Mode, gp: Option<&AffineGp<f64>>) -> Result<Vec<Episode>> {
    (0..cfg.trials).map(|i| run_episode(cfg, mode, gp, trial_seed(cfg.seed, i))).collect()
}
